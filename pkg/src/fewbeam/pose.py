"""Metric relative pose from LiDAR-anchored 3D-2D correspondences.

Keypoints in the target frame that land on a LiDAR pixel carry a metric
depth, so the PnP pose that maps them into a source frame is metric too.
Correspondences come from Harris corners matched by normalised
cross-correlation; any external matcher can feed :func:`attach_depth`
directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .geometry import CameraIntrinsics, PoseSE3, rotation_from_rotvec, skew

logger = logging.getLogger(__name__)


class PnPError(RuntimeError):
    """Raised when a pose cannot be estimated from the given correspondences."""


# ---------------------------------------------------------------------------
# keypoints and matching


def _gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def harris_response(img, sigma: float = 1.0, k: float = 0.04) -> np.ndarray:
    g = _gray(img)
    gx = ndimage.sobel(g, axis=1, mode="reflect")
    gy = ndimage.sobel(g, axis=0, mode="reflect")
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris_corners(
    img, max_corners: int = 400, border: int = 4, nms_size: int = 5, rel_threshold: float = 1e-4, mask=None
) -> np.ndarray:
    """Integer (u, v) corner locations, strongest first.

    With ``mask`` given, only masked pixels compete, and non-maximum
    suppression runs among them alone. Ties in response are broken by
    raster order so the result is deterministic.
    """
    R = harris_response(img)
    peak = R.max(initial=0.0)
    if peak <= 1e-12:
        return np.zeros((0, 2), dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != R.shape:
            raise ValueError("keypoint mask differs in resolution from the image")
        R = np.where(mask, R, -np.inf)
    keep = (R == ndimage.maximum_filter(R, size=nms_size, mode="constant", cval=-np.inf)) & (R > rel_threshold * peak)
    keep[:border] = keep[-border:] = False
    keep[:, :border] = keep[:, -border:] = False
    vs, us = np.nonzero(keep)
    order = np.lexsort((np.arange(len(vs)), -R[vs, us]))[:max_corners]
    return np.stack([us[order], vs[order]], axis=1).astype(np.int64)


def _parabola_offset(left, centre, right) -> float:
    den = left - 2 * centre + right
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / den, -0.5, 0.5))


def detect_and_match(
    I_t,
    I_s,
    *,
    max_corners: int = 400,
    half_window: int = 4,
    search_radius: int = 32,
    ncc_threshold: float = 0.9,
    mask=None,
) -> list:
    """Match Harris corners of ``I_t`` into ``I_s`` by NCC block search.

    Returns ``[(p_t, p_s), ...]`` with ``p_t`` integer and ``p_s``
    refined to sub-pixel accuracy by a parabola through the NCC peak.
    A perfect (NCC == 1) integer match is left unrefined. ``mask``
    restricts keypoints, e.g. to pixels that carry a LiDAR return.
    """
    a = _gray(I_t)
    b = _gray(I_s)
    if a.shape != b.shape:
        raise ValueError(f"images differ in resolution: {a.shape} vs {b.shape}")
    H, W = a.shape
    hw = half_window
    side = 2 * hw + 1
    corners = harris_corners(a, max_corners=max_corners, border=hw, mask=mask)
    matches = []
    for u, v in corners:
        patch = a[v - hw : v + hw + 1, u - hw : u + hw + 1]
        pz = patch - patch.mean()
        pn = np.sqrt((pz * pz).sum())
        if pn < 1e-9:
            continue
        u0, u1 = max(hw, u - search_radius), min(W - 1 - hw, u + search_radius)
        v0, v1 = max(hw, v - search_radius), min(H - 1 - hw, v + search_radius)
        region = b[v0 - hw : v1 + hw + 1, u0 - hw : u1 + hw + 1]
        win = sliding_window_view(region, (side, side))
        wz = win - win.mean(axis=(-1, -2), keepdims=True)
        wn = np.sqrt((wz * wz).sum(axis=(-1, -2)))
        num = np.einsum("ijkl,kl->ij", wz, pz)
        with np.errstate(invalid="ignore", divide="ignore"):
            ncc = np.where(wn > 1e-9, num / (wn * pn), -1.0)
        iy, ix = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
        best = ncc[iy, ix]
        if best < ncc_threshold:
            continue
        du = dv = 0.0
        if best < 1.0 - 1e-12:
            if 0 < ix < ncc.shape[1] - 1:
                du = _parabola_offset(ncc[iy, ix - 1], best, ncc[iy, ix + 1])
            if 0 < iy < ncc.shape[0] - 1:
                dv = _parabola_offset(ncc[iy - 1, ix], best, ncc[iy + 1, ix])
        matches.append(((float(u), float(v)), (u0 + ix + du, v0 + iy + dv)))
    return matches


# ---------------------------------------------------------------------------
# correspondences


@dataclass
class CorrespondenceSet:
    """Target pixels with metric depth paired with source pixels."""

    p_t: np.ndarray
    depth: np.ndarray
    p_s: np.ndarray

    def __post_init__(self):
        self.p_t = np.asarray(self.p_t, dtype=np.float64).reshape(-1, 2)
        self.p_s = np.asarray(self.p_s, dtype=np.float64).reshape(-1, 2)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        if not (len(self.p_t) == len(self.p_s) == len(self.depth)):
            raise ValueError("correspondence arrays differ in length")
        if np.any(~(self.depth > 0)):
            raise ValueError("every correspondence needs a positive depth")

    def __len__(self):
        return len(self.depth)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)))

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.p_t[idx], self.depth[idx], self.p_s[idx])

    def points_3d(self, K: CameraIntrinsics) -> np.ndarray:
        """Target-camera 3D points, one row per correspondence."""
        x = (self.p_t[:, 0] - K.cx) / K.fx
        y = (self.p_t[:, 1] - K.cy) / K.fy
        return np.stack([x, y, np.ones_like(x)], axis=1) * self.depth[:, None]


def attach_depth(matches, H_t) -> CorrespondenceSet:
    """Keep matches whose target pixel (rounded) has a LiDAR return."""
    H_t = np.asarray(H_t, dtype=np.float64)
    if len(matches) == 0:
        return CorrespondenceSet.empty()
    pt = np.array([m[0] for m in matches], dtype=np.float64)
    ps = np.array([m[1] for m in matches], dtype=np.float64)
    cols = np.rint(pt[:, 0]).astype(np.int64)
    rows = np.rint(pt[:, 1]).astype(np.int64)
    inside = (rows >= 0) & (rows < H_t.shape[0]) & (cols >= 0) & (cols < H_t.shape[1])
    d = np.zeros(len(pt))
    d[inside] = H_t[rows[inside], cols[inside]]
    keep = d > 0
    return CorrespondenceSet(pt[keep], d[keep], ps[keep])


# ---------------------------------------------------------------------------
# solvers


def reprojection_errors(pose: PoseSE3, X: np.ndarray, p_s: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pixel distance between projected ``X`` and observations; inf behind the camera."""
    Xs = X @ pose.R.T + pose.r
    z = Xs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xs[:, 0] / z + K.cx
        v = K.fy * Xs[:, 1] / z + K.cy
    err = np.hypot(u - p_s[:, 0], v - p_s[:, 1])
    return np.where(z > 1e-9, err, np.inf)


def _normalised(K: CameraIntrinsics, p) -> np.ndarray:
    return np.stack([(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy], axis=1)


def _dlt(X: np.ndarray, xn: np.ndarray) -> PoseSE3:
    c = X.mean(axis=0)
    s = np.sqrt(((X - c) ** 2).sum(axis=1).mean())
    if s < 1e-12:
        raise PnPError("3D points are coincident")
    Xh = np.hstack([(X - c) / s, np.ones((len(X), 1))])
    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-10 * sv[0]:
        raise PnPError("rank-deficient linear system (degenerate point configuration)")
    P = Vt[-1].reshape(3, 4)
    # undo the point normalisation: X' = (X - c) / s
    M = P[:, :3] / s
    p4 = P[:, 3] - M @ c
    if np.linalg.det(M) < 0:
        M, p4 = -M, -p4
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    return PoseSE3(R, p4 / S.mean())


def _refine(pose: PoseSE3, X: np.ndarray, obs: np.ndarray, K: CameraIntrinsics, max_iter: int = 50) -> PoseSE3:
    """Levenberg-Marquardt on SE(3) minimising squared pixel error."""

    def residual(R, r):
        Xs = X @ R.T + r
        z = Xs[:, 2]
        if np.any(z <= 1e-9):
            return None, Xs
        res = np.stack([K.fx * Xs[:, 0] / z + K.cx, K.fy * Xs[:, 1] / z + K.cy], axis=1) - obs
        return res.ravel(), Xs

    R, r = pose.R.copy(), pose.r.copy()
    res, Xs = residual(R, r)
    if res is None:
        raise PnPError("initial pose puts points behind the camera")
    cost = res @ res
    lam = 1e-3
    for _ in range(max_iter):
        x, y, z = Xs.T
        Jp = np.zeros((len(X), 2, 3))
        Jp[:, 0, 0] = K.fx / z
        Jp[:, 0, 2] = -K.fx * x / z**2
        Jp[:, 1, 1] = K.fy / z
        Jp[:, 1, 2] = -K.fy * y / z**2
        Jx = np.zeros((len(X), 3, 6))
        Jx[:, :, :3] = -np.einsum("ij,njk->nik", np.eye(3), np.array([skew(p) for p in Xs]))
        Jx[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk->nik", Jp, Jx).reshape(-1, 6)
        g = J.T @ res
        A = J.T @ J
        improved = False
        while lam < 1e12:
            try:
                delta = -np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = rotation_from_rotvec(delta[:3])
            R_new, r_new = dR @ R, dR @ r + delta[3:]
            res_new, Xs_new = residual(R_new, r_new)
            if res_new is not None and res_new @ res_new <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            break
        step = np.linalg.norm(delta)
        small = cost - res_new @ res_new <= 1e-15 * max(cost, 1e-300)
        R, r, res, Xs, cost = R_new, r_new, res_new, Xs_new, res_new @ res_new
        lam = max(lam / 10, 1e-12)
        if step < 1e-14 or small:
            break
    if not np.isfinite(cost):
        raise PnPError("refinement diverged")
    return PoseSE3(R, r)


def solve_pnp(corr: CorrespondenceSet, K: CameraIntrinsics, init: PoseSE3 | None = None) -> PoseSE3:
    """Least-squares pose from >= 6 correspondences.

    Linear DLT initialisation (skipped when ``init`` is given) followed by
    Levenberg-Marquardt refinement of the pixel reprojection error.
    """
    if len(corr) < 6:
        raise PnPError(f"PnP needs at least 6 correspondences, got {len(corr)}")
    X = corr.points_3d(K)
    pose = init if init is not None else _dlt(X, _normalised(K, corr.p_s))
    return _refine(pose, X, corr.p_s, K)


def _kabsch(A: np.ndarray, B: np.ndarray) -> PoseSE3:
    """Rigid transform mapping rows of ``A`` onto rows of ``B``."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    U, _, Vt = np.linalg.svd((B - cb).T @ (A - ca))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return PoseSE3(R, cb - R @ ca)


def p3p(X: np.ndarray, bearings: np.ndarray) -> list:
    """All poses consistent with three 3D points and their unit bearings.

    Grunert's formulation: the ratios of the three ray distances satisfy a
    quartic whose real positive roots give up to four solutions.
    """
    X = np.asarray(X, dtype=np.float64)
    f = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    if min(a, b, c) < 1e-9:
        return []
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]
    a2, b2, c2 = a * a, b * b, c * c
    q = (a2 - c2) / b2
    p = (a2 + c2) / b2
    A4 = (q - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (q * (1 - q) * cb - (1 - p) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (q**2 - 1 + 2 * q**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2 - 4 * p * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
    A1 = 4 * (-q * (1 + q) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - p) * ca * cg)
    A0 = (1 + q) ** 2 - 4 * a2 / b2 * cg**2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max() < 1e-300:
        return []
    roots = np.roots(coeffs)
    poses = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = root.real
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((q - 1) * v * v - 2 * q * cb * v + 1 + q) / den
        if u <= 0:
            continue
        s1sq = b2 / (1 + v * v - 2 * v * cb)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        cam = np.stack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        try:
            poses.append(_kabsch(X, cam))
        except ValueError:
            continue
    return poses


@dataclass
class PnPResult:
    pose: PoseSE3
    inliers: np.ndarray
    mean_error: float
    hypothesis: PoseSE3 | None = None

    @property
    def num_inliers(self) -> int:
        return int(self.inliers.sum())


def _bearings(K: CameraIntrinsics, p) -> np.ndarray:
    n = _normalised(K, p)
    b = np.hstack([n, np.ones((len(n), 1))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def pnp_ransac(
    corr: CorrespondenceSet,
    K: CameraIntrinsics,
    iterations: int = 100,
    reproj_threshold: float = 2.0,
    seed: int = 0,
) -> PnPResult:
    """RANSAC over 4-point samples (P3P on three, the fourth picks the root).

    The winning hypothesis has the most inliers; ties go to the lower mean
    inlier error and then to the earlier iteration. The pose is refit on
    the winning consensus set with :func:`solve_pnp`.
    """
    n = len(corr)
    if n < 6:
        raise PnPError(f"RANSAC needs at least 6 correspondences, got {n}")
    X = corr.points_3d(K)
    f = _bearings(K, corr.p_s)
    rng = np.random.default_rng(seed)
    best = None  # (count, -mean_err, -index) maximised
    best_pose = best_mask = None
    for it in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        candidates = p3p(X[idx[:3]], f[idx[:3]])
        if not candidates:
            continue
        check = [reprojection_errors(P, X[idx[3:]], corr.p_s[idx[3:]], K)[0] for P in candidates]
        hyp = candidates[int(np.argmin(check))]
        err = reprojection_errors(hyp, X, corr.p_s, K)
        mask = err < reproj_threshold
        count = int(mask.sum())
        if count == 0:
            continue
        key = (count, -float(err[mask].mean()), -it)
        if best is None or key > best:
            best, best_pose, best_mask = key, hyp, mask
    if best is None or best[0] < 6:
        raise PnPError("no consensus set of at least 6 correspondences")
    inl = corr.subset(best_mask)
    pose = solve_pnp(inl, K, init=best_pose)
    err = reprojection_errors(pose, X[best_mask], corr.p_s[best_mask], K)
    return PnPResult(pose, best_mask, float(err.mean()), best_pose)


def filter_by_translation_median(magnitudes, c: float = 3.0) -> np.ndarray:
    """Keep flags: an estimate is dropped when its magnitude exceeds ``c`` times the median."""
    m = np.asarray(magnitudes, dtype=np.float64).reshape(-1)
    if m.size == 0:
        raise ValueError("need at least one translation magnitude")
    if not c > 0:
        raise ValueError("c must be positive")
    return m <= c * np.median(m)
