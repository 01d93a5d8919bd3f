"""Vectorised numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np
from scipy import ndimage

EDGE_TOLERANCE = 1e-9


def bilinear_sample(image, u, v):
    """Sample ``image`` (H, W, C) at continuous pixel coordinates.

    Returns the sampled values, their derivatives with respect to ``u`` and
    ``v`` (both (h, w, C)), and a validity mask that is false wherever the
    coordinate is non-finite or outside ``[0, W-1] x [0, H-1]`` by more
    than ``EDGE_TOLERANCE`` (round-off on border pixels is clamped).
    """
    H, W, C = image.shape
    finite = np.isfinite(u) & np.isfinite(v)
    uu = np.where(finite, u, -1.0)
    vv = np.where(finite, v, -1.0)
    tol = EDGE_TOLERANCE
    valid = finite & (uu >= -tol) & (vv >= -tol) & (uu <= W - 1 + tol) & (vv <= H - 1 + tol)
    uu = np.clip(np.where(valid, uu, 0.0), 0.0, W - 1)
    vv = np.clip(np.where(valid, vv, 0.0), 0.0, H - 1)
    x0 = np.minimum(np.floor(uu).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(vv).astype(np.int64), H - 2)
    fx = (uu - x0)[..., None]
    fy = (vv - y0)[..., None]
    a = image[y0, x0]
    b = image[y0, x0 + 1]
    c = image[y0 + 1, x0]
    d = image[y0 + 1, x0 + 1]
    out = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    gu = (1 - fy) * (b - a) + fy * (d - c)
    gv = (1 - fx) * (c - a) + fx * (d - b)
    m = valid[..., None]
    return np.where(m, out, 0.0), np.where(m, gu, 0.0), np.where(m, gv, 0.0), valid


def zbuffer_scatter(rows, cols, depths, height, width):
    out = np.full((height, width), np.inf)
    np.minimum.at(out, (rows, cols), depths)
    out[np.isinf(out)] = 0.0
    return out


def min_dilate(sparse, kernel_side):
    work = np.where(sparse > 0, sparse, np.inf)
    work = ndimage.minimum_filter(work, size=kernel_side, mode="constant", cval=np.inf)
    return np.where(np.isfinite(work), work, 0.0)


def _box3(x):
    p = np.pad(x, [(1, 1), (1, 1)] + [(0, 0)] * (x.ndim - 2), mode="reflect")
    r = p[:-2] + p[1:-1] + p[2:]
    return (r[:, :-2] + r[:, 1:-1] + r[:, 2:]) / 9.0


def _fold_axis(g, axis):
    g = np.moveaxis(g, axis, 0)
    out = g[1:-1].copy()
    out[1] += g[0]
    out[-2] += g[-1]
    return np.moveaxis(out, 0, axis)


def _box3_adjoint(g):
    g = g / 9.0
    H, W = g.shape[:2]
    pad = np.zeros((H + 2, W + 2) + g.shape[2:])
    for di in range(3):
        for dj in range(3):
            pad[di : di + H, dj : dj + W] += g
    return _fold_axis(_fold_axis(pad, 0), 1)


def ssim_partials(x, y, c1, c2):
    """Per-pixel SSIM and its partials w.r.t. box(y), box(y*y), box(x*y)."""
    mu_x = _box3(x)
    mu_y = _box3(y)
    n1 = 2 * mu_x * mu_y + c1
    n2 = 2 * (_box3(x * y) - mu_x * mu_y) + c2
    d1 = mu_x * mu_x + mu_y * mu_y + c1
    d2 = (_box3(x * x) - mu_x * mu_x) + (_box3(y * y) - mu_y * mu_y) + c2
    den = d1 * d2
    S = n1 * n2 / den
    dA = 2 * mu_x * (n2 - n1) / den - S * 2 * mu_y * (d2 - d1) / den
    return S, dA, -S / d2, 2 * n1 / den


def ssim_backward(x, y, w, dA, dB, dC):
    """Gradient w.r.t. y of sum(w[..., None] * SSIM)."""
    w = w[..., None]
    return _box3_adjoint(w * dA) + 2 * y * _box3_adjoint(w * dB) + x * _box3_adjoint(w * dC)
