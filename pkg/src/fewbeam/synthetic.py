"""Ray-cast scenes with exact depth, poses and ring-ordered LiDAR sweeps.

World coordinates coincide with the camera frame of frame 0 (x right,
y down, z forward). Scenes contain an optional textured ground plane
``y = ground_height``, an optional textured background plane
``z = background_depth`` and axis-aligned textured boxes that translate by
their velocity every frame. Textures are seeded value noise attached to each
surface, so a moving box carries its texture along.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, pixel_rays, project_pointcloud_to_image, rotation_about_axis
from .lidar import KITTI_ELEVATIONS_DEG, default_extrinsics, segment_beams, subsample_beams



def _hash(ix, iy, salt):
    """SplitMix64-style hash of integer lattice coordinates -> [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(salt) * np.uint64(0x165667B19E3779F9)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(p, q, spacing: float, salt: int):
    gx = p / spacing
    gy = q / spacing
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = _fade(gx - x0)
    fy = _fade(gy - y0)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    a = _hash(x0, y0, salt)
    b = _hash(x0 + 1, y0, salt)
    c = _hash(x0, y0 + 1, salt)
    d = _hash(x0 + 1, y0 + 1, salt)
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


@dataclass(frozen=True)
class Texture:
    seed: int
    spacing: float = 0.6
    octaves: int = 4
    contrast: float = 2.2
    tint: tuple = (1.0, 1.0, 1.0)

    def __call__(self, p, q) -> np.ndarray:
        """RGB albedo in [0, 1] at surface coordinates (meters)."""
        chans = []
        for c in range(3):
            acc = np.zeros(np.shape(p))
            for o in range(self.octaves):
                acc += value_noise(p, q, self.spacing * 2**o, self.seed * 1009 + c * 97 + o * 13 + 1)
            acc /= self.octaves
            chans.append(np.clip(0.5 + self.contrast * (acc - 0.5), 0.0, 1.0) * self.tint[c])
        return np.stack(chans, axis=-1)


@dataclass
class Box:
    center: tuple
    size: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    texture_seed: int | None = None

    def bounds(self, frame: int):
        c = np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)
        h = np.asarray(self.size, dtype=np.float64) / 2
        return c - h, c + h


@dataclass
class Scene:
    ground_height: float | None = 1.65
    background_depth: float | None = 40.0
    boxes: list = field(default_factory=list)
    seed: int = 0
    texture_spacing: float = 0.6
    contrast: float = 2.2
    light: tuple = (0.4, -0.8, 0.45)

    def texture(self, index: int) -> Texture:
        return Texture(self.seed * 7919 + index, self.texture_spacing, 4, self.contrast)

    def without_boxes(self) -> "Scene":
        return Scene(self.ground_height, self.background_depth, [], self.seed, self.texture_spacing, self.contrast, self.light)


# surface ids: 0 nothing, 1 ground, 2 background, 3 + i box i
GROUND_ID = 1
BACKGROUND_ID = 2
BOX_ID0 = 3


def _shade(scene: Scene, normal) -> float:
    L = -np.asarray(scene.light, dtype=np.float64)
    L /= np.linalg.norm(L)
    return 0.35 + 0.65 * max(0.0, float(np.dot(normal, L)))


def cast_rays(scene: Scene, origin, dirs, frame: int = 0, need_color: bool = True):
    """Nearest hit of rays ``origin + t * dirs``.

    Returns ``t`` (inf on a miss), surface id and RGB colour.
    """
    origin = np.asarray(origin, dtype=np.float64)
    t_best = np.full(dirs.shape[:-1], np.inf)
    ids = np.zeros(dirs.shape[:-1], dtype=np.int64)
    face = np.zeros(dirs.shape[:-1], dtype=np.int64)
    eps = 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        if scene.ground_height is not None:
            t = (scene.ground_height - origin[1]) / dirs[..., 1]
            hit = (t > eps) & (t < t_best)
            t_best = np.where(hit, t, t_best)
            ids = np.where(hit, GROUND_ID, ids)
        if scene.background_depth is not None:
            t = (scene.background_depth - origin[2]) / dirs[..., 2]
            hit = (t > eps) & (t < t_best)
            t_best = np.where(hit, t, t_best)
            ids = np.where(hit, BACKGROUND_ID, ids)
        for i, box in enumerate(scene.boxes):
            lo, hi = box.bounds(frame)
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            tnear = tmin.max(axis=-1)
            tfar = tmax.min(axis=-1)
            hit = (tnear <= tfar) & (tnear > eps) & (tnear < t_best)
            t_best = np.where(hit, tnear, t_best)
            ids = np.where(hit, BOX_ID0 + i, ids)
            # face index: axis*2 + (1 if the max-side slab)
            axis = tmin.argmax(axis=-1)
            d_axis = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
            face = np.where(hit, axis * 2 + (d_axis < 0), face)
    if not need_color:
        return t_best, ids, None
    color = np.zeros(dirs.shape[:-1] + (3,))
    P = origin + np.where(np.isfinite(t_best), t_best, 0.0)[..., None] * dirs
    m = ids == GROUND_ID
    if m.any():
        color[m] = scene.texture(0)(P[m, 0], P[m, 2]) * _shade(scene, np.array([0.0, -1.0, 0.0]))
    m = ids == BACKGROUND_ID
    if m.any():
        color[m] = scene.texture(1)(P[m, 0], P[m, 1]) * _shade(scene, np.array([0.0, 0.0, -1.0]))
    for i, box in enumerate(scene.boxes):
        lo, _ = box.bounds(frame)
        seed_index = 2 + i if box.texture_seed is None else 10_000 + box.texture_seed
        tex = Texture(scene.seed * 7919 + seed_index, scene.texture_spacing, 4, scene.contrast, (1.0, 0.85, 0.75))
        for f in range(6):
            m = (ids == BOX_ID0 + i) & (face == f)
            if not m.any():
                continue
            axis = f // 2
            normal = np.zeros(3)
            normal[axis] = 1.0 if f % 2 else -1.0
            a1, a2 = [k for k in range(3) if k != axis]
            local = P[m] - lo
            color[m] = tex(local[:, a1] + 17.0 * f, local[:, a2]) * _shade(scene, normal)
    return t_best, ids, np.clip(color, 0.0, 1.0)


def render(scene: Scene, K: CameraIntrinsics, pose: PoseSE3, frame: int = 0, with_ids: bool = False):
    """Render the scene from a camera-to-world ``pose``.

    Returns ``(image, depth)``; depth is camera z (0 where nothing is hit).
    With ``with_ids`` the surface-id map is appended.
    """
    rays = pixel_rays(K)
    dirs = rays @ pose.R.T
    t, ids, color = cast_rays(scene, pose.r, dirs, frame)
    # rays have unit z in the camera frame, so the ray parameter is depth
    depth = np.where(np.isfinite(t), t, 0.0)
    if with_ids:
        return color, depth, ids
    return color, depth


@dataclass
class LidarSpec:
    elevations: np.ndarray = field(default_factory=lambda: np.deg2rad(KITTI_ELEVATIONS_DEG))
    azimuth_step: float = np.deg2rad(0.2)
    extrinsics: PoseSE3 = field(default_factory=default_extrinsics)
    keep_every: int = 1
    max_range: float = 120.0
    jitter: float = 0.0


def simulate_lidar(
    scene: Scene,
    sensor_pose: PoseSE3,
    elevations,
    azimuth_step: float,
    frame: int = 0,
    max_range: float = 120.0,
    jitter: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Ring-ordered (N, 4) sweep from a sensor-to-world ``sensor_pose``.

    Beams are emitted in the order given, each sweeping counter-clockwise
    from azimuth ``step/2`` to ``2pi - step/2``; rays without a hit are
    dropped.
    """
    elevations = np.atleast_1d(np.asarray(elevations, dtype=np.float64))
    if elevations.size == 0:
        raise ValueError("at least one elevation is required")
    n_az = int(round(2 * np.pi / azimuth_step))
    phi = (np.arange(n_az) + 0.5) * (2 * np.pi / n_az)
    el, ph = np.meshgrid(elevations, phi, indexing="ij")
    d_lidar = np.stack([np.cos(el) * np.cos(ph), np.cos(el) * np.sin(ph), np.sin(el)], axis=-1).reshape(-1, 3)
    dirs = d_lidar @ sensor_pose.R.T
    t, ids, color = cast_rays(scene, sensor_pose.r, dirs, frame)
    hit = np.isfinite(t) & (t <= max_range)
    rng_t = t[hit]
    if jitter > 0:
        rng_t = rng_t + np.random.default_rng(seed).normal(0.0, jitter, rng_t.shape)
    pts = d_lidar[hit] * rng_t[:, None]
    intensity = color[hit].mean(axis=-1)
    return np.hstack([pts, intensity[:, None]])


@dataclass
class EgoMotion:
    """Camera motion per frame, expressed in the frame-0 camera axes."""

    translation: tuple = (0.0, 0.0, 1.0)
    yaw: float = 0.0

    def camera_to_world(self, frame: int) -> PoseSE3:
        R = rotation_about_axis("y", self.yaw * frame)
        return PoseSE3(R, frame * np.asarray(self.translation, dtype=np.float64))


@dataclass
class FrameTriplet:
    """Target frame ``t`` with sources ``t-1`` and ``t+1``.

    ``poses[i]`` maps target-camera points into source ``i``'s camera.
    ``lidar`` is the projected sparse depth of frame ``t``; ``cloud`` the
    (possibly sub-sampled) sweep it came from.
    """

    K: CameraIntrinsics
    target: np.ndarray
    sources: list
    depth: np.ndarray
    source_depths: list
    poses: list
    lidar: np.ndarray
    cloud: np.ndarray
    extrinsics: PoseSE3
    ids: np.ndarray
    scene: Scene | None = None

    def box_mask(self, index: int) -> np.ndarray:
        return self.ids == BOX_ID0 + index


def relative_pose(cam_to_world_t: PoseSE3, cam_to_world_s: PoseSE3) -> PoseSE3:
    return cam_to_world_s.inverse().compose(cam_to_world_t)


def make_triplet(scene: Scene, K: CameraIntrinsics, ego_motion: EgoMotion, lidar_spec: LidarSpec | None = None, seed: int = 0) -> FrameTriplet:
    """Render frames t-1, t, t+1 and the frame-t LiDAR of a scene."""
    if np.linalg.norm(ego_motion.translation) <= 0:
        raise ValueError("ego motion must be non-zero")
    lidar_spec = lidar_spec or LidarSpec()
    T = {k: ego_motion.camera_to_world(k) for k in (-1, 0, 1)}
    target, depth, ids = render(scene, K, T[0], frame=0, with_ids=True)
    sources, sdepths, poses = [], [], []
    for k in (-1, 1):
        img, d = render(scene, K, T[k], frame=k)
        sources.append(img)
        sdepths.append(d)
        poses.append(relative_pose(T[0], T[k]))
    sensor_pose = T[0].compose(lidar_spec.extrinsics)
    cloud = simulate_lidar(
        scene, sensor_pose, lidar_spec.elevations, lidar_spec.azimuth_step, 0, lidar_spec.max_range, lidar_spec.jitter, seed
    )
    if lidar_spec.keep_every > 1:
        cloud = subsample_beams(segment_beams(cloud), lidar_spec.keep_every)
    lidar = project_pointcloud_to_image(cloud, lidar_spec.extrinsics, K)
    return FrameTriplet(K, target, sources, depth, sdepths, poses, lidar, cloud, lidar_spec.extrinsics, ids, scene)


# ---------------------------------------------------------------------------
# ready-made configurations


def default_intrinsics(height: int = 96, width: int = 320) -> CameraIntrinsics:
    """KITTI-crop-like pinhole camera (vertical half field of view ~14 deg)."""
    f = 1.2 * width / 2
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def four_beam_spec(**kwargs) -> LidarSpec:
    """The 64-beam table reduced to every 16th ring."""
    return LidarSpec(keep_every=16, **kwargs)


def benchmark_scene(seed: int = 0) -> Scene:
    """Static street-like scene: ground, back wall at 20 m, three boxes."""
    rng = np.random.default_rng(seed)
    boxes = [
        Box((-3.2 + rng.uniform(-0.3, 0.3), 0.9, 9.0 + rng.uniform(-1, 1)), (1.8, 1.5, 3.0)),
        Box((3.0 + rng.uniform(-0.3, 0.3), 0.65, 13.0 + rng.uniform(-1, 1)), (2.0, 2.0, 2.0)),
        Box((0.2 + rng.uniform(-0.5, 0.5), 1.0, 16.0 + rng.uniform(-1, 1)), (1.6, 1.3, 1.6)),
    ]
    return Scene(ground_height=1.65, background_depth=20.0, boxes=boxes, seed=seed)


def co_moving_scene(seed: int = 0, velocity=(1.0, 0.0, 0.0), with_box: bool = True) -> Scene:
    """A box ahead of the camera moving with the camera's own velocity."""
    rng = np.random.default_rng(1000 + seed)
    boxes = []
    if with_box:
        boxes.append(Box((rng.uniform(-0.4, 0.4), 0.85, 8.0 + rng.uniform(-0.5, 0.5)), (2.0, 1.6, 2.0), tuple(velocity)))
    return Scene(ground_height=1.65, background_depth=20.0, boxes=boxes, seed=seed)


DEFAULT_EGO = EgoMotion(translation=(1.0, 0.0, 0.0))


def kitti_intrinsics() -> CameraIntrinsics:
    """Full-resolution KITTI colour camera."""
    return CameraIntrinsics(721.5, 721.5, 609.6, 172.9, 1242, 375)


def pnp_problem(seed: int, n: int = 100, outlier_fraction: float = 0.3, noise: float = 0.5, K: CameraIntrinsics | None = None):
    """Random correspondence set from a known driving-like relative pose.

    Target pixels are uniform over the image with depths in [5, 40] m; the
    pose moves about 1 m forward with small rotation. The first
    ``round(outlier_fraction * n)`` observations are replaced by uniform
    random pixels. Returns ``(correspondences, pose, outlier_flags)``.
    """
    from .pose import CorrespondenceSet

    K = K or kitti_intrinsics()
    rng = np.random.default_rng(seed)
    pose = PoseSE3.from_rotvec(rng.normal(0.0, 0.02, 3), np.array([0.0, 0.0, -1.0]) + rng.normal(0.0, 0.1, 3))
    p_t = np.column_stack([rng.uniform(0, K.width - 1, n), rng.uniform(0, K.height - 1, n)])
    depth = rng.uniform(5.0, 40.0, n)
    X = CorrespondenceSet(p_t, depth, np.zeros((n, 2))).points_3d(K)
    Xs = pose.apply(X)
    p_s = np.column_stack([K.fx * Xs[:, 0] / Xs[:, 2] + K.cx, K.fy * Xs[:, 1] / Xs[:, 2] + K.cy])
    p_s += rng.normal(0.0, noise, (n, 2))
    k = int(round(outlier_fraction * n))
    p_s[:k] = np.column_stack([rng.uniform(0, K.width - 1, k), rng.uniform(0, K.height - 1, k)])
    outliers = np.zeros(n, dtype=bool)
    outliers[:k] = True
    return CorrespondenceSet(p_t, depth, p_s), pose, outliers
