"""Ring recovery, beam sub-sampling and sparse-depth dilation.

Point clouds are plain ``(N, 4)`` float arrays (x forward, y left, z up,
intensity). Sparse depth images are ``(H, W)`` arrays with 0 marking pixels
without a measurement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

TWO_PI = 2.0 * np.pi


def as_point_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 4))
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError(f"point cloud must be (N, 3) or (N, 4), got {pts.shape}")
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    return pts


@dataclass
class BeamSegmentedCloud:
    points: np.ndarray
    rings: np.ndarray

    @property
    def num_rings(self) -> int:
        return int(self.rings.max()) + 1 if len(self.rings) else 0

    def ring(self, index: int) -> np.ndarray:
        return self.points[self.rings == index]


def azimuth(x, y):
    """Horizontal angle in (-pi, pi]; x forward, y left."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((x == 0) & (y == 0)):
        raise ValueError("azimuth undefined for a point on the sensor axis")
    phi = np.arctan2(y, x)
    # arctan2 returns -pi for (-1, -0.0); fold onto the closed end
    phi = np.where(phi == -np.pi, np.pi, phi)
    return phi if phi.ndim else float(phi)


def segment_beams(cloud) -> BeamSegmentedCloud:
    """Assign a ring index to every point of an acquisition-ordered sweep.

    A new ring starts wherever the azimuth, taken in [0, 2pi), drops by more
    than pi between consecutive points.
    """
    pts = as_point_cloud(cloud)
    if len(pts) == 0:
        return BeamSegmentedCloud(pts, np.zeros(0, dtype=np.int64))
    phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), TWO_PI)
    wraps = np.diff(phi) < -np.pi
    rings = np.concatenate([[0], np.cumsum(wraps)]).astype(np.int64)
    return BeamSegmentedCloud(pts, rings)


def subsample_beams(cloud: BeamSegmentedCloud, keep_every: int) -> np.ndarray:
    """Keep the rings whose index is a multiple of ``keep_every``."""
    if keep_every < 1:
        raise ValueError("keep_every must be >= 1")
    return cloud.points[cloud.rings % keep_every == 0]


def subsample_segmented(cloud: BeamSegmentedCloud, keep_every: int) -> BeamSegmentedCloud:
    """Like :func:`subsample_beams` but keeps the original ring labels."""
    keep = cloud.rings % keep_every == 0
    return BeamSegmentedCloud(cloud.points[keep], cloud.rings[keep])


def dilate_sparse_depth(H, kernel_side: int, iterations: int) -> np.ndarray:
    """Grow valid measurements over a square neighbourhood.

    Each iteration gives every pixel within the kernel footprint of a valid
    pixel the smallest competing depth. ``iterations=0`` returns a copy.
    """
    if kernel_side < 1 or iterations < 0:
        raise ValueError("kernel_side must be >= 1 and iterations >= 0")
    out = np.array(H, dtype=np.float64)
    for _ in range(iterations):
        out = kernels.min_dilate(out, kernel_side)
    return out


def rings_in_image(cloud: BeamSegmentedCloud, extrinsics, K) -> set[int]:
    """Ring indices having at least one point that projects into the image."""
    from .geometry import project_points

    if len(cloud.points) == 0:
        return set()
    X = extrinsics.apply(cloud.points[:, :3])
    u, v, z = project_points(K, X)
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (np.rint(u) >= 0) & (np.rint(u) <= K.width - 1) & (np.rint(v) >= 0) & (np.rint(v) <= K.height - 1)
    return set(np.unique(cloud.rings[inside]).tolist())


# HDL-64E style elevation table (degrees): 32 upper lasers at 1/3 deg pitch,
# 32 lower lasers at 1/2 deg pitch.
KITTI_ELEVATIONS_DEG = np.concatenate(
    [2.0 - np.arange(32) / 3.0, -8.83 - 0.5 * np.arange(32)]
)

# Sensor pose in the camera frame of the front camera (approximate KITTI rig).
LIDAR_OFFSET_IN_CAMERA = np.array([0.0, -0.08, -0.27])


def lidar_to_camera_rotation() -> np.ndarray:
    """Axes change from (x fwd, y left, z up) to (x right, y down, z fwd)."""
    return np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_extrinsics():
    from .geometry import PoseSE3

    return PoseSE3(lidar_to_camera_rotation(), LIDAR_OFFSET_IN_CAMERA)
