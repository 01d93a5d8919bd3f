"""Pinhole camera model, rigid poses and inverse warping of source views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole calibration. All values in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel-centre convention)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            w,
            h,
        )


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``X' = R X + r``. Translation in meters."""

    R: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        r = np.array(self.r, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        R.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, r) -> "PoseSE3":
        return cls(rotation_from_rotvec(rotvec), r)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.r
        return T

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform points stored along the last axis."""
        return X @ self.R.T + self.r

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.R @ other.R, self.R @ other.r + self.r)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.r)

    def with_translation(self, r) -> "PoseSE3":
        return PoseSE3(self.R, r)

    def rotation_angle(self) -> float:
        c = (np.trace(self.R) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __eq__(self, other):
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.r, other.r)

    def __repr__(self):
        return f"PoseSE3(R={self.R.tolist()}, r={self.r.tolist()})"


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotation_from_rotvec(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    R = np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)
    # re-orthonormalise to keep PoseSE3's 1e-9 invariant under accumulation
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def rotation_about_axis(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    raise ValueError(axis)


@dataclass(frozen=True)
class ProjectedPoint:
    u: float
    v: float
    z: float
    valid: bool


def project_point(K: CameraIntrinsics, pose: PoseSE3, depth: float, p_t) -> ProjectedPoint:
    """Map target pixel ``p_t`` seen at ``depth`` into the source view.

    The returned ``z`` is the source-frame depth; ``valid`` is false when the
    point lands behind the source camera.
    """
    if not depth > 0:
        raise ValueError("depth must be positive")
    u, v = p_t
    X = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    Xs = pose.R @ X + pose.r
    z = float(Xs[2])
    if z <= 0:
        return ProjectedPoint(float("nan"), float("nan"), z, False)
    return ProjectedPoint(K.fx * Xs[0] / z + K.cx, K.fy * Xs[1] / z + K.cy, z, True)


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) array of K^-1 [u, v, 1] for every pixel centre."""
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def backproject(K: CameraIntrinsics, D: np.ndarray) -> np.ndarray:
    """Camera-frame 3D points (H, W, 3) for a dense depth map."""
    D = np.asarray(D, dtype=np.float64)
    if D.shape != K.shape:
        raise ValueError(f"depth shape {D.shape} does not match intrinsics {K.shape}")
    return pixel_rays(K) * D[..., None]


def project_points(K: CameraIntrinsics, X: np.ndarray):
    """Pinhole projection of camera-frame points; returns (u, v, z)."""
    z = X[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * X[..., 0] / z + K.cx
        v = K.fy * X[..., 1] / z + K.cy
    return u, v, z


def transform_coords(K: CameraIntrinsics, D: np.ndarray, pose: PoseSE3, rays=None):
    """Source-view coordinates (u, v, z) of every target pixel under ``pose``.

    Also returns ``a = R K^-1 p`` (the derivative of the source-frame point
    with respect to depth) and the source-frame points, both (H, W, 3).
    """
    if rays is None:
        rays = pixel_rays(K)
    a = rays @ pose.R.T
    Xs = a * D[..., None] + pose.r
    u, v, z = project_points(K, Xs)
    return u, v, z, a, Xs


@dataclass
class WarpResult:
    """Source image resampled into the target view.

    ``image`` holds 0 wherever ``valid`` is false.
    """

    image: np.ndarray
    valid: np.ndarray
    grad_u: np.ndarray | None = None
    grad_v: np.ndarray | None = None
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    z: np.ndarray | None = None


def _check_warp_inputs(I_s, D_t, K):
    I_s = np.asarray(I_s, dtype=np.float64)
    D_t = np.asarray(D_t, dtype=np.float64)
    if I_s.shape[:2] != D_t.shape:
        raise ValueError("source image and depth map differ in resolution")
    if D_t.shape != K.shape:
        raise ValueError("depth map does not match intrinsics")
    return I_s, D_t


def warp_image(I_s, D_t, pose: PoseSE3, K: CameraIntrinsics, rays=None) -> WarpResult:
    """Inverse-warp ``I_s`` into the target view with bilinear sampling."""
    I_s, D_t = _check_warp_inputs(I_s, D_t, K)
    squeeze = I_s.ndim == 2
    u, v, z, _, _ = transform_coords(K, D_t, pose, rays)
    front = z > 0
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    img, gu, gv, valid = kernels.bilinear_sample(I_s, u, v)
    if squeeze:
        img, gu, gv = img[..., 0], gu[..., 0], gv[..., 0]
    return WarpResult(img, valid, gu, gv, u, v, z)


def coord_depth_derivatives(K: CameraIntrinsics, a: np.ndarray, Xs: np.ndarray):
    """d(u, v)/d(depth) for ``Xs = a * depth + r``."""
    z = Xs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = K.fx * (a[..., 0] * z - Xs[..., 0] * a[..., 2]) / (z * z)
        dv = K.fy * (a[..., 1] * z - Xs[..., 1] * a[..., 2]) / (z * z)
    return du, dv


def warp_jacobian(I_s, D_t, pose: PoseSE3, K: CameraIntrinsics, rays=None) -> np.ndarray:
    """Derivative of each warped intensity with respect to its own target depth.

    Shape matches the warped image; zero where the warp is invalid.
    """
    I_s, D_t = _check_warp_inputs(I_s, D_t, K)
    squeeze = I_s.ndim == 2
    u, v, z, a, Xs = transform_coords(K, D_t, pose, rays)
    front = z > 0
    _, gu, gv, valid = kernels.bilinear_sample(I_s, np.where(front, u, np.nan), np.where(front, v, np.nan))
    du, dv = coord_depth_derivatives(K, a, Xs)
    du = np.where(valid, du, 0.0)[..., None]
    dv = np.where(valid, dv, 0.0)[..., None]
    J = gu * du + gv * dv
    return J[..., 0] if squeeze else J


def project_pointcloud_to_image(cloud, extrinsics: PoseSE3, K: CameraIntrinsics) -> np.ndarray:
    """Sparse depth image from a sensor-frame point cloud.

    Points are moved into the camera frame by ``extrinsics``; each point in
    front of the camera writes its depth to the nearest pixel, keeping the
    closest depth on collisions. Unmeasured pixels are 0.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        return np.zeros(K.shape)
    X = extrinsics.apply(pts[:, :3])
    z = X[:, 2]
    keep = z > 0
    X, z = X[keep], z[keep]
    u, v, _ = project_points(K, X)
    col = np.rint(u)
    row = np.rint(v)
    inside = (col >= 0) & (col <= K.width - 1) & (row >= 0) & (row <= K.height - 1)
    return kernels.zbuffer_scatter(row[inside].astype(np.int64), col[inside].astype(np.int64), z[inside], K.height, K.width)
