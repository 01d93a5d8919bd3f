"""File formats: Velodyne scans, KITTI-style depth PNGs, plain-text configs.

Every reader validates its input and raises :class:`FormatError` naming
the offending offset, line or field instead of returning partial data.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .eval import InstanceMask
from .geometry import CameraIntrinsics, PoseSE3
from .pose import CorrespondenceSet
from .synthetic import Box, EgoMotion, FrameTriplet, LidarSpec, Scene

DEPTH_PNG_SCALE = 256.0


class FormatError(ValueError):
    """Malformed file content."""


# ---------------------------------------------------------------------------
# point clouds


def read_velodyne_bin(path) -> np.ndarray:
    """(N, 4) little-endian float32 records (x, y, z, intensity), in file order."""
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise FormatError(f"{path}: size {len(data)} bytes is not a multiple of 16 (trailing bytes at offset {len(data) - len(data) % 16})")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(pts)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FormatError(f"{path}: non-finite value in point {i} field {j} (byte offset {16 * i + 4 * j})")
    return pts.astype(np.float64)


def write_velodyne_bin(path, cloud) -> None:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("cloud must be (N, 3) or (N, 4)")
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# images


def write_depth_png16(path, depth) -> None:
    """Store ``round(depth * 256)`` as 16-bit grayscale; 0 marks invalid pixels."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("depth must be 2-D")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("depth must be finite and non-negative")
    if np.any(d >= 65536 / DEPTH_PNG_SCALE):
        raise ValueError(f"depth values must be below {65536 / DEPTH_PNG_SCALE:g} m for 16-bit storage")
    Image.fromarray(np.rint(d * DEPTH_PNG_SCALE).astype(np.uint16)).save(path, format="PNG")


def read_depth_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG" or im.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected a 16-bit grayscale PNG, got {im.format} mode {im.mode}")
        raw = np.array(im, dtype=np.uint16)
    return raw.astype(np.float64) / DEPTH_PNG_SCALE


def write_rgb_png(path, image) -> None:
    """Float image in [0, 1] (H, W, 3) or (H, W) as 8-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError("image must be 2-D or 3-D")
    Image.fromarray(np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)).save(path, format="PNG")


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            raise FormatError(f"{path}: expected an 8-bit RGB or grayscale PNG, got mode {im.mode}")
        arr = np.array(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_instance_png(path, masks, shape) -> None:
    """Id map: pixel value is the instance id, 0 is background."""
    ids = np.zeros(shape, dtype=np.uint16)
    for m in masks:
        if not 0 < m.instance_id < 65536:
            raise ValueError("instance ids must be in 1..65535")
        ids[m.mask] = m.instance_id
    Image.fromarray(ids).save(path, format="PNG")


def read_instance_png(path) -> list:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "L", "I"):
            raise FormatError(f"{path}: unsupported instance map mode {im.mode}")
        ids = np.array(im).astype(np.int64)
    return [InstanceMask(ids == k, int(k)) for k in np.unique(ids) if k != 0]


# ---------------------------------------------------------------------------
# small text formats


def _floats(text: str, n: int, where: str) -> list:
    parts = text.split()
    if len(parts) != n:
        raise FormatError(f"{where}: expected {n} numbers, found {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def format_intrinsics(K: CameraIntrinsics) -> str:
    return f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n"


def parse_intrinsics(text: str, where: str = "intrinsics") -> CameraIntrinsics:
    lines = [l for l in text.splitlines() if l.strip()]
    if len(lines) != 1:
        raise FormatError(f"{where}: expected one line 'fx fy cx cy width height'")
    fx, fy, cx, cy, w, h = _floats(lines[0], 6, where)
    if w != int(w) or h != int(h):
        raise FormatError(f"{where}: width and height must be integers")
    try:
        return CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(format_intrinsics(K))


def read_intrinsics(path) -> CameraIntrinsics:
    return parse_intrinsics(Path(path).read_text(), str(path))


def format_pose(pose: PoseSE3) -> str:
    """Row-major 3x4 ``[R | r]`` on one line."""
    return " ".join(repr(float(x)) for x in pose.matrix[:3].ravel())


def write_poses(path, poses) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def read_poses(path) -> list:
    poses = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = _floats(line, 12, f"{path}:{i}")
        M = np.array(vals).reshape(3, 4)
        try:
            R = M[:, :3]
            U, _, Vt = np.linalg.svd(R)
            if not np.allclose(R, U @ Vt, atol=1e-6):
                raise ValueError("rotation block is not orthonormal")
            poses.append(PoseSE3(U @ Vt if np.linalg.det(U @ Vt) > 0 else R, M[:, 3]))
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from None
    return poses


def write_correspondences_csv(path, corr: CorrespondenceSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u_t", "v_t", "depth", "u_s", "v_s"])
        for (ut, vt), d, (us, vs) in zip(corr.p_t, corr.depth, corr.p_s):
            w.writerow([repr(float(x)) for x in (ut, vt, d, us, vs)])


def read_correspondences_csv(path) -> CorrespondenceSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["u_t", "v_t", "depth", "u_s", "v_s"]:
        raise FormatError(f"{path}: header must be u_t,v_t,depth,u_s,v_s")
    data = []
    for i, row in enumerate(rows[1:], 2):
        if not row:
            continue
        data.append(_floats(" ".join(row), 5, f"{path}:{i}"))
    arr = np.array(data, dtype=np.float64).reshape(-1, 5)
    try:
        return CorrespondenceSet(arr[:, :2], arr[:, 2], arr[:, 3:])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# key-value configs


def _parse_kv_lines(text: str, where: str):
    """Yield (line_no, key, value); a bare word starts a stanza and has value None."""
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            if len(line.split()) != 1:
                raise FormatError(f"{where}:{i}: expected 'key = value' or a stanza name")
            yield i, line, None
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{where}:{i}: empty key")
        yield i, key, value


def _convert(value: str, example, where: str):
    try:
        if isinstance(example, bool):
            low = value.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(example, int):
            return int(value)
        if isinstance(example, float):
            return float(value)
        if isinstance(example, tuple):
            parts = tuple(float(v) for v in value.replace(",", " ").split())
            if example and len(parts) != len(example):
                raise ValueError(f"expected {len(example)} numbers")
            return parts
        return value
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


SCENE_DEFAULTS = {
    "seed": 0,
    "ground_height": 1.65,
    "background_depth": 20.0,
    "texture_spacing": 0.6,
    "contrast": 2.2,
    "light": (0.4, -0.8, 0.45),
    "height": 96,
    "width": 320,
    "ego_translation": (1.0, 0.0, 0.0),
    "ego_yaw": 0.0,
    "keep_every": 16,
    "azimuth_step_deg": 0.2,
    "lidar_jitter": 0.0,
}
BOX_DEFAULTS = {"center": (0.0, 0.0, 10.0), "size": (1.0, 1.0, 1.0), "velocity": (0.0, 0.0, 0.0), "texture_seed": -1}


@dataclasses.dataclass
class SceneConfig:
    scene: Scene
    K: CameraIntrinsics
    ego: EgoMotion
    lidar: LidarSpec
    seed: int


def parse_scene_config(text: str, where: str = "scene") -> SceneConfig:
    """Top-level ``key = value`` settings followed by repeated ``box`` stanzas.

    ``ground_height`` or ``background_depth`` set to ``none`` removes that
    plane. Box ``texture_seed = -1`` picks the scene default.
    """
    top = dict(SCENE_DEFAULTS)
    boxes: list = []
    current = None
    for i, key, value in _parse_kv_lines(text, where):
        loc = f"{where}:{i}"
        if value is None:
            if key != "box":
                raise FormatError(f"{loc}: unknown stanza {key!r}")
            current = dict(BOX_DEFAULTS)
            boxes.append(current)
            continue
        table, defaults = (current, BOX_DEFAULTS) if current is not None else (top, SCENE_DEFAULTS)
        if key not in defaults:
            raise FormatError(f"{loc}: unknown key {key!r}")
        if key in ("ground_height", "background_depth") and value.lower() == "none":
            table[key] = None
        else:
            table[key] = _convert(value, defaults[key], loc)
    scene = Scene(
        ground_height=top["ground_height"],
        background_depth=top["background_depth"],
        boxes=[Box(b["center"], b["size"], b["velocity"], None if b["texture_seed"] < 0 else b["texture_seed"]) for b in boxes],
        seed=top["seed"],
        texture_spacing=top["texture_spacing"],
        contrast=top["contrast"],
        light=top["light"],
    )
    from .synthetic import default_intrinsics

    try:
        K = default_intrinsics(top["height"], top["width"])
        lidar = LidarSpec(azimuth_step=np.deg2rad(top["azimuth_step_deg"]), keep_every=top["keep_every"], jitter=top["lidar_jitter"])
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    return SceneConfig(scene, K, EgoMotion(top["ego_translation"], top["ego_yaw"]), lidar, top["seed"])


def format_scene_config(cfg: SceneConfig) -> str:
    s = cfg.scene
    lines = [
        f"seed = {cfg.seed}",
        f"ground_height = {'none' if s.ground_height is None else repr(float(s.ground_height))}",
        f"background_depth = {'none' if s.background_depth is None else repr(float(s.background_depth))}",
        f"texture_spacing = {s.texture_spacing!r}",
        f"contrast = {s.contrast!r}",
        "light = " + " ".join(repr(float(v)) for v in s.light),
        f"height = {cfg.K.height}",
        f"width = {cfg.K.width}",
        "ego_translation = " + " ".join(repr(float(v)) for v in cfg.ego.translation),
        f"ego_yaw = {float(cfg.ego.yaw)!r}",
        f"keep_every = {cfg.lidar.keep_every}",
        f"azimuth_step_deg = {float(np.rad2deg(cfg.lidar.azimuth_step))!r}",
        f"lidar_jitter = {float(cfg.lidar.jitter)!r}",
    ]
    for b in s.boxes:
        lines.append("box")
        for key in ("center", "size", "velocity"):
            lines.append(f"  {key} = " + " ".join(repr(float(v)) for v in getattr(b, key)))
        lines.append(f"  texture_seed = {-1 if b.texture_seed is None else b.texture_seed}")
    return "\n".join(lines) + "\n"


def read_scene_config(path) -> SceneConfig:
    return parse_scene_config(Path(path).read_text(), str(path))


def parse_run_config(text: str, where: str = "config") -> dict:
    """Key-value overrides for :class:`~fewbeam.optimizer.OptimizeConfig`; unknown keys are rejected."""
    from .optimizer import OptimizeConfig

    defaults = {f.name: f.default for f in dataclasses.fields(OptimizeConfig)}
    out = {}
    for i, key, value in _parse_kv_lines(text, where):
        if value is None or key not in defaults:
            raise FormatError(f"{where}:{i}: unknown key {key!r}")
        out[key] = _convert(value, defaults[key], f"{where}:{i}")
    return out


def read_run_config(path) -> dict:
    return parse_run_config(Path(path).read_text(), str(path))


# ---------------------------------------------------------------------------
# triplet directories

TRIPLET_FILES = {
    "target": "target.png",
    "sources": ("source_0.png", "source_1.png"),
    "depth": "depth_gt.png",
    "lidar": "lidar.png",
    "poses": "poses.txt",
    "intrinsics": "intrinsics.txt",
    "extrinsics": "extrinsics.txt",
    "cloud": "cloud.bin",
    "instances": "instances.png",
}


def write_triplet(directory, triplet: FrameTriplet) -> None:
    from .synthetic import BOX_ID0

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_rgb_png(d / TRIPLET_FILES["target"], triplet.target)
    for name, img in zip(TRIPLET_FILES["sources"], triplet.sources):
        write_rgb_png(d / name, img)
    write_depth_png16(d / TRIPLET_FILES["depth"], np.where(triplet.depth < 256 - 1 / 512, triplet.depth, 0.0))
    write_depth_png16(d / TRIPLET_FILES["lidar"], np.where(triplet.lidar < 256 - 1 / 512, triplet.lidar, 0.0))
    write_poses(d / TRIPLET_FILES["poses"], triplet.poses)
    write_intrinsics(d / TRIPLET_FILES["intrinsics"], triplet.K)
    write_poses(d / TRIPLET_FILES["extrinsics"], [triplet.extrinsics])
    write_velodyne_bin(d / TRIPLET_FILES["cloud"], triplet.cloud)
    masks = [InstanceMask(triplet.ids == BOX_ID0 + i, i + 1) for i in range(len(triplet.scene.boxes))]
    write_instance_png(d / TRIPLET_FILES["instances"], [m for m in masks if m.mask.any()], triplet.depth.shape)


@dataclasses.dataclass
class TripletFiles:
    """A triplet as read back from disk (images quantised to 8 bits)."""

    K: CameraIntrinsics
    target: np.ndarray
    sources: list
    depth: np.ndarray
    lidar: np.ndarray
    poses: list
    extrinsics: PoseSE3 | None
    instances: list


def read_triplet(directory) -> TripletFiles:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    K = read_intrinsics(d / TRIPLET_FILES["intrinsics"])
    target = read_rgb_png(d / TRIPLET_FILES["target"])
    sources = [read_rgb_png(d / n) for n in TRIPLET_FILES["sources"] if (d / n).exists()]
    if target.shape[:2] != K.shape or any(s.shape != target.shape for s in sources):
        raise FormatError(f"{d}: image sizes disagree with the intrinsics")
    gt = d / TRIPLET_FILES["depth"]
    depth = read_depth_png16(gt) if gt.exists() else np.zeros(K.shape)
    lidar_path = d / TRIPLET_FILES["lidar"]
    lidar = read_depth_png16(lidar_path) if lidar_path.exists() else None
    poses = read_poses(d / TRIPLET_FILES["poses"]) if (d / TRIPLET_FILES["poses"]).exists() else []
    ext_path = d / TRIPLET_FILES["extrinsics"]
    extrinsics = read_poses(ext_path)[0] if ext_path.exists() else None
    inst_path = d / TRIPLET_FILES["instances"]
    instances = read_instance_png(inst_path) if inst_path.exists() else []
    return TripletFiles(K, target, sources, depth, lidar, poses, extrinsics, instances)


def list_pngs(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
