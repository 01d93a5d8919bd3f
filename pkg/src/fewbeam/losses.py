"""Self-supervision objectives and their analytic depth gradients.

Per-pixel maps follow one convention throughout: a :class:`LossMap` carries
values plus a boolean validity mask, and invalid pixels never contribute to
a reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, PoseSE3, WarpResult, coord_depth_derivatives, pixel_rays, transform_coords
from . import kernels

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LIDAR_VARIANTS = ("none", "naive", "masked", "hinted")


@dataclass
class LossConfig:
    alpha: float = 0.85
    smooth_weight: float = 1e-3
    lidar_weight: float = 1.0
    lidar_variant: str = "masked"
    multiscale_levels: int = 1
    automask: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.smooth_weight < 0 or self.lidar_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lidar_variant not in LIDAR_VARIANTS:
            raise ValueError(f"lidar_variant must be one of {LIDAR_VARIANTS}")
        if self.multiscale_levels not in (1, 2, 3, 4):
            raise ValueError("multiscale_levels must be in 1..4")


@dataclass
class LossMap:
    values: np.ndarray
    valid: np.ndarray

    def mean(self) -> float:
        n = int(self.valid.sum())
        return float(self.values[self.valid].sum() / n) if n else 0.0


# ---------------------------------------------------------------------------
# SSIM


def _as3(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM with a 3x3 mean window (mirror padding)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    S = kernels.ssim_partials(a, b, SSIM_C1, SSIM_C2)[0]
    return S[..., 0] if a.ndim == 2 else S


# ---------------------------------------------------------------------------
# photometric reconstruction


def reprojection_map(target, image, alpha: float) -> np.ndarray:
    x, y = _as3(target), _as3(image)
    S = ssim(x, y)
    return (alpha / 2 * (1 - S) + (1 - alpha) * np.abs(x - y)).mean(axis=-1)


def ssim_support(valid) -> np.ndarray:
    """Pixels whose whole 3x3 SSIM window is valid."""
    return ndimage.minimum_filter(np.asarray(valid, dtype=bool), size=3, mode="mirror")


def _stack_min(maps, supports):
    stacked = np.where(np.stack(supports), np.stack(maps), np.inf)
    best = np.argmin(stacked, axis=0)
    values = np.take_along_axis(stacked, best[None], axis=0)[0]
    valid = np.isfinite(values)
    return np.where(valid, values, 0.0), valid, best


def photometric_loss(I_t, warped_sources: Sequence[WarpResult], alpha: float = 0.85) -> LossMap:
    """Minimum over sources of the SSIM + L1 reconstruction error."""
    if len(warped_sources) == 0:
        raise ValueError("photometric loss needs at least one source")
    x = _as3(I_t)
    maps, supports = [], []
    for w in warped_sources:
        y = _as3(w.image)
        if y.shape != x.shape:
            raise ValueError("warped source differs in resolution from the target")
        maps.append(reprojection_map(x, y, alpha))
        supports.append(ssim_support(w.valid))
    values, valid, _ = _stack_min(maps, supports)
    return LossMap(values, valid)


def identity_loss(I_t, raw_sources, alpha: float = 0.85) -> np.ndarray:
    """Min-over-sources loss of the unwarped sources against the target."""
    return np.min([reprojection_map(I_t, s, alpha) for s in raw_sources], axis=0)


def automask(I_t, raw_sources, warped_sources, alpha: float = 0.85) -> np.ndarray:
    """Pixels whose warped loss beats the stationary-camera loss."""
    warped = photometric_loss(I_t, warped_sources, alpha)
    ident = identity_loss(I_t, raw_sources, alpha)
    return warped.valid & (warped.values < ident)


# ---------------------------------------------------------------------------
# LiDAR self-supervision


def lidar_loss(D_hat, H_t, L_photo: LossMap, L_photo_H: LossMap | None = None, variant: str = "masked") -> LossMap:
    """Per-pixel combination of the photometric map and the LiDAR L1 term.

    ``naive`` adds the L1 term on every LiDAR pixel, ``masked`` replaces the
    photometric term there, ``hinted`` adds it only where reconstructing
    with the LiDAR depth beats the predicted depth (strict comparison).
    Pixels without LiDAR always keep the photometric value.
    """
    if variant not in ("naive", "masked", "hinted"):
        raise ValueError(f"unknown LiDAR loss variant {variant!r}")
    D = np.asarray(D_hat, dtype=np.float64)
    H = np.asarray(H_t, dtype=np.float64)
    has = H > 0
    l1 = np.abs(D - H)
    photo = np.where(L_photo.valid, L_photo.values, 0.0)
    if variant == "naive":
        values = np.where(has, l1 + photo, photo)
        valid = L_photo.valid | has
    elif variant == "masked":
        values = np.where(has, l1, photo)
        valid = L_photo.valid | has
    else:
        if L_photo_H is None:
            raise ValueError("hinted variant requires the LiDAR-warped photometric map")
        use = has & L_photo.valid & L_photo_H.valid & (L_photo_H.values < L_photo.values)
        values = np.where(use, l1 + photo, photo)
        valid = L_photo.valid
    return LossMap(np.where(valid, values, 0.0), valid)


# ---------------------------------------------------------------------------
# regularisers


def _smoothness_parts(D, I):
    disp = 1.0 / np.asarray(D, dtype=np.float64)
    m = disp.mean()
    nd = disp / m
    img = _as3(I)
    wx = np.exp(-np.abs(np.diff(img, axis=1)).sum(axis=-1))
    wy = np.exp(-np.abs(np.diff(img, axis=0)).sum(axis=-1))
    dx = np.diff(nd, axis=1)
    dy = np.diff(nd, axis=0)
    return disp, m, wx, wy, dx, dy


def smoothness_loss(D_hat, I_t) -> float:
    """Edge-aware smoothness of the mean-normalised inverse depth."""
    D_hat = np.asarray(D_hat, dtype=np.float64)
    if D_hat.shape != np.asarray(I_t).shape[:2]:
        raise ValueError("depth and image differ in resolution")
    _, _, wx, wy, dx, dy = _smoothness_parts(D_hat, I_t)
    total = 0.0
    if dx.size:
        total += float((np.abs(dx) * wx).mean())
    if dy.size:
        total += float((np.abs(dy) * wy).mean())
    return total


def smoothness_gradient(D_hat, I_t) -> np.ndarray:
    D = np.asarray(D_hat, dtype=np.float64)
    disp, m, wx, wy, dx, dy = _smoothness_parts(D, I_t)
    g = np.zeros_like(D)
    if dx.size:
        gx = np.sign(dx) * wx / dx.size
        g[:, 1:] += gx
        g[:, :-1] -= gx
    if dy.size:
        gy = np.sign(dy) * wy / dy.size
        g[1:, :] += gy
        g[:-1, :] -= gy
    g_disp = g / m - (g * disp).sum() / (m * m * disp.size)
    return -g_disp * disp * disp


def imu_pose_loss(r, r_hat) -> float:
    """Absolute difference of translation magnitudes."""
    return abs(float(np.linalg.norm(r)) - float(np.linalg.norm(r_hat)))


# ---------------------------------------------------------------------------
# assembled objective


@dataclass
class LossInputs:
    """Everything the objective needs besides the depth parameters.

    ``lidar`` is the supervision target (possibly dilated); ``None`` or an
    all-zero image disables the LiDAR term.
    """

    target: np.ndarray
    sources: list
    poses: list
    K: CameraIntrinsics
    lidar: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.target = _as3(self.target)
        self.sources = [_as3(s) for s in self.sources]
        if not self.sources:
            raise ValueError("at least one source image is required")
        if len(self.poses) != len(self.sources):
            raise ValueError("one pose per source image is required")
        for s in self.sources:
            if s.shape != self.target.shape:
                raise ValueError("source and target differ in resolution")
        if self.target.shape[:2] != self.K.shape:
            raise ValueError("images do not match the intrinsics")
        if self.lidar is not None:
            self.lidar = np.asarray(self.lidar, dtype=np.float64)
            if self.lidar.shape != self.K.shape:
                raise ValueError("sparse depth does not match the intrinsics")

    @property
    def rays(self):
        if "rays" not in self._cache:
            self._cache["rays"] = pixel_rays(self.K)
        return self._cache["rays"]

    def identity(self, alpha):
        key = ("identity", alpha)
        if key not in self._cache:
            self._cache[key] = identity_loss(self.target, self.sources, alpha)
        return self._cache[key]


@dataclass
class _SourceEval:
    map: np.ndarray
    support: np.ndarray
    y: np.ndarray
    gu: np.ndarray
    gv: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    du_k: np.ndarray | None
    dv_k: np.ndarray | None
    S_parts: tuple
    cell: np.ndarray


def _eval_source(inputs: LossInputs, D, s, alpha, scale, want_scale):
    K = inputs.K
    pose = inputs.poses[s]
    r = pose.r * scale
    u, v, z, a, Xs = transform_coords(K, D, PoseSE3(pose.R, r), inputs.rays)
    front = z > 0
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    y, gu, gv, valid = kernels.bilinear_sample(inputs.sources[s], u, v)
    du, dv = coord_depth_derivatives(K, a, Xs)
    du = np.where(valid, du, 0.0)
    dv = np.where(valid, dv, 0.0)
    du_k = dv_k = None
    if want_scale:
        # dX/dlog(scale) = scaled translation
        rr = np.broadcast_to(r, Xs.shape)
        du_k, dv_k = coord_depth_derivatives(K, rr, Xs)
        du_k = np.where(valid, du_k, 0.0)
        dv_k = np.where(valid, dv_k, 0.0)
    x = inputs.target
    S, dA, dB, dC = kernels.ssim_partials(x, y, SSIM_C1, SSIM_C2)
    m = (alpha / 2 * (1 - S) + (1 - alpha) * np.abs(x - y)).mean(axis=-1)
    cell = np.stack([np.floor(np.nan_to_num(u, nan=-1)), np.floor(np.nan_to_num(v, nan=-1))])
    return _SourceEval(m, ssim_support(valid), y, gu, gv, du, dv, du_k, dv_k, (S, dA, dB, dC), cell)


def _photo_min(evals):
    return _stack_min([e.map for e in evals], [e.support for e in evals])


def _scale_objective(inputs: LossInputs, D, config: LossConfig, scale, want_scale, want_grad, record):
    """Loss at one pyramid level (depth already at full resolution)."""
    alpha = config.alpha
    evals = [_eval_source(inputs, D, s, alpha, scale, want_scale) for s in range(len(inputs.sources))]
    photo, photo_valid, best = _photo_min(evals)
    keep = photo_valid
    if config.automask:
        keep = keep & (photo < inputs.identity(alpha))

    variant = config.lidar_variant
    H = inputs.lidar
    use_lidar = variant != "none" and H is not None and config.lidar_weight > 0
    has = (H > 0) if use_lidar else np.zeros(D.shape, dtype=bool)
    photo_support = keep
    lidar_support = np.zeros(D.shape, dtype=bool)
    hint_use = None
    if use_lidar:
        if variant == "naive":
            lidar_support = has
        elif variant == "masked":
            photo_support = keep & ~has
            lidar_support = has
        else:
            D_H = np.where(has, H, D)
            evals_H = [_eval_source(inputs, D_H, s, alpha, scale, False) for s in range(len(inputs.sources))]
            photo_H, valid_H, _ = _photo_min(evals_H)
            hint_use = has & photo_valid & valid_H & (photo_H < photo)
            lidar_support = hint_use

    n_photo = int(photo_support.sum())
    n_lidar = int(lidar_support.sum())
    photo_term = float(photo[photo_support].sum() / n_photo) if n_photo else 0.0
    resid = D - (H if use_lidar else 0.0)
    lidar_term = float(np.abs(resid[lidar_support]).sum() / n_lidar) if n_lidar else 0.0
    smooth_term = smoothness_loss(D, inputs.target) if config.smooth_weight > 0 else 0.0
    total = photo_term + config.lidar_weight * lidar_term + config.smooth_weight * smooth_term
    terms = {"photometric": photo_term, "lidar": lidar_term, "smoothness": smooth_term}
    if record is not None:
        sig = [photo_support, lidar_support, np.sign(resid) * lidar_support, best * photo_valid]
        for e in evals:
            sig += [e.cell, e.support, np.sign(inputs.target - e.y)]
        if hint_use is not None:
            sig.append(hint_use)
        if config.smooth_weight > 0:
            nd = 1.0 / D
            sig += [np.sign(np.diff(nd, axis=1)), np.sign(np.diff(nd, axis=0))]
        record.append(sig)

    if not want_grad:
        return total, terms, None, 0.0

    gD = np.zeros(D.shape)
    g_scale = 0.0
    if n_photo:
        x = inputs.target
        C = x.shape[-1]
        for s, e in enumerate(evals):
            w = np.where(photo_support & (best == s), 1.0 / n_photo, 0.0)
            if not w.any():
                continue
            S, dA, dB, dC = e.S_parts
            gy = kernels.ssim_backward(x, e.y, (-alpha / (2 * C)) * w, dA, dB, dC)
            gy = gy + (1 - alpha) / C * w[..., None] * np.sign(e.y - x)
            gD += (gy * (e.gu * e.du[..., None] + e.gv * e.dv[..., None])).sum(axis=-1)
            if want_scale:
                g_scale += float((gy * (e.gu * e.du_k[..., None] + e.gv * e.dv_k[..., None])).sum())
    if n_lidar:
        gD += config.lidar_weight * np.sign(resid) * lidar_support / n_lidar
    if config.smooth_weight > 0:
        gD += config.smooth_weight * smoothness_gradient(D, inputs.target)
    return total, terms, gD, g_scale


def total_loss_and_gradient(state, inputs: LossInputs, config: LossConfig, want_grad: bool = True, record=None):
    """Weighted objective summed over pyramid levels, with its gradient.

    ``state`` is a :class:`fewbeam.field.DepthField`; the gradient is w.r.t.
    ``state.get_flat()``. Returns ``(loss, gradient, terms)``; ``terms``
    holds each loss component summed over levels.
    """
    levels = min(config.multiscale_levels, state.levels)
    scale = state.translation_scale
    want_scale = want_grad and state.learn_translation_scale
    total = 0.0
    terms = {"photometric": 0.0, "lidar": 0.0, "smoothness": 0.0}
    level_grads = [None] * state.levels
    g_scale = 0.0
    for l in range(levels):
        z = state.logits(l)
        D = state.decode(z)
        t, tm, gD, gs = _scale_objective(inputs, D, config, scale, want_scale, want_grad, record)
        total += t
        for k in terms:
            terms[k] += tm[k]
        if want_grad:
            level_grads[l] = gD * state.decode_derivative(z, D)
            g_scale += gs
    if not want_grad:
        return total, None, terms
    # d/dlog(scale) of the translation multiplier
    grad = state.flatten_gradient(level_grads, g_scale)
    return total, grad, terms
