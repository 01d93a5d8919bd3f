# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror :mod:`fewbeam._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, isfinite, INFINITY

cnp.import_array()

cdef double EDGE_TOL = 1e-9


def bilinear_sample(const double[:, :, ::1] image, const double[:, ::1] u, const double[:, ::1] v):
    cdef Py_ssize_t H = image.shape[0], W = image.shape[1], C = image.shape[2]
    cdef Py_ssize_t h = u.shape[0], w = u.shape[1]
    out_np = np.zeros((h, w, C), dtype=np.float64)
    gu_np = np.zeros((h, w, C), dtype=np.float64)
    gv_np = np.zeros((h, w, C), dtype=np.float64)
    valid_np = np.zeros((h, w), dtype=np.bool_)
    cdef double[:, :, ::1] out = out_np
    cdef double[:, :, ::1] gu = gu_np
    cdef double[:, :, ::1] gv = gv_np
    cdef cnp.npy_bool[:, ::1] valid = valid_np
    cdef Py_ssize_t i, j, c, x0, y0
    cdef double uu, vv, fx, fy, a, b, cc, d
    for i in range(h):
        for j in range(w):
            uu = u[i, j]
            vv = v[i, j]
            if not (isfinite(uu) and isfinite(vv)):
                continue
            if uu < -EDGE_TOL or vv < -EDGE_TOL or uu > W - 1 + EDGE_TOL or vv > H - 1 + EDGE_TOL:
                continue
            if uu < 0.0:
                uu = 0.0
            elif uu > W - 1:
                uu = W - 1
            if vv < 0.0:
                vv = 0.0
            elif vv > H - 1:
                vv = H - 1
            x0 = <Py_ssize_t>floor(uu)
            y0 = <Py_ssize_t>floor(vv)
            if x0 > W - 2:
                x0 = W - 2
            if y0 > H - 2:
                y0 = H - 2
            fx = uu - x0
            fy = vv - y0
            valid[i, j] = 1
            for c in range(C):
                a = image[y0, x0, c]
                b = image[y0, x0 + 1, c]
                cc = image[y0 + 1, x0, c]
                d = image[y0 + 1, x0 + 1, c]
                out[i, j, c] = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d)
                gu[i, j, c] = (1.0 - fy) * (b - a) + fy * (d - cc)
                gv[i, j, c] = (1.0 - fx) * (cc - a) + fx * (d - b)
    return out_np, gu_np, gv_np, valid_np


def zbuffer_scatter(const cnp.int64_t[::1] rows, const cnp.int64_t[::1] cols,
                    const double[::1] depths, Py_ssize_t height, Py_ssize_t width):
    out_np = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef Py_ssize_t k, n = rows.shape[0]
    cdef cnp.int64_t r, c
    cdef double z
    for k in range(n):
        r = rows[k]
        c = cols[k]
        z = depths[k]
        if out[r, c] == 0.0 or z < out[r, c]:
            out[r, c] = z
    return out_np


def min_dilate(const double[:, ::1] sparse, Py_ssize_t kernel_side):
    cdef Py_ssize_t H = sparse.shape[0], W = sparse.shape[1]
    cdef Py_ssize_t lo = kernel_side // 2
    cdef Py_ssize_t hi = kernel_side - 1 - lo
    out_np = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    # separable: min over rows, then over columns
    tmp_np = np.full((H, W), INFINITY, dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_np
    cdef Py_ssize_t i, j, k, k0, k1
    cdef double best, val
    for i in range(H):
        for j in range(W):
            best = INFINITY
            k0 = j - lo
            k1 = j + hi
            if k0 < 0:
                k0 = 0
            if k1 > W - 1:
                k1 = W - 1
            for k in range(k0, k1 + 1):
                val = sparse[i, k]
                if val > 0.0 and val < best:
                    best = val
            tmp[i, j] = best
    for i in range(H):
        k0 = i - lo
        k1 = i + hi
        if k0 < 0:
            k0 = 0
        if k1 > H - 1:
            k1 = H - 1
        for j in range(W):
            best = INFINITY
            for k in range(k0, k1 + 1):
                val = tmp[k, j]
                if val < best:
                    best = val
            if best < INFINITY:
                out[i, j] = best
    return out_np


cdef inline Py_ssize_t _mirror(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def ssim_partials(const double[:, :, ::1] x, const double[:, :, ::1] y, double c1, double c2):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    S_np = np.empty((H, W, C))
    dA_np = np.empty((H, W, C))
    dB_np = np.empty((H, W, C))
    dC_np = np.empty((H, W, C))
    cdef double[:, :, ::1] S = S_np
    cdef double[:, :, ::1] dA = dA_np
    cdef double[:, :, ::1] dB = dB_np
    cdef double[:, :, ::1] dC = dC_np
    cdef Py_ssize_t i, j, c, di, dj, ii, jj
    cdef double sx, sy, sxx, syy, sxy, xv, yv, mx, my, vx, vy, cxy, n1, n2, d1, d2, den, s
    with nogil:
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    sx = 0.0
                    sy = 0.0
                    sxx = 0.0
                    syy = 0.0
                    sxy = 0.0
                    for di in range(-1, 2):
                        ii = _mirror(i + di, H)
                        for dj in range(-1, 2):
                            jj = _mirror(j + dj, W)
                            xv = x[ii, jj, c]
                            yv = y[ii, jj, c]
                            sx = sx + xv
                            sy = sy + yv
                            sxx = sxx + xv * xv
                            syy = syy + yv * yv
                            sxy = sxy + xv * yv
                    mx = sx / 9.0
                    my = sy / 9.0
                    vx = sxx / 9.0 - mx * mx
                    vy = syy / 9.0 - my * my
                    cxy = sxy / 9.0 - mx * my
                    n1 = 2.0 * mx * my + c1
                    n2 = 2.0 * cxy + c2
                    d1 = mx * mx + my * my + c1
                    d2 = vx + vy + c2
                    den = d1 * d2
                    s = n1 * n2 / den
                    S[i, j, c] = s
                    dA[i, j, c] = 2.0 * mx * (n2 - n1) / den - s * 2.0 * my * (d2 - d1) / den
                    dB[i, j, c] = -s / d2
                    dC[i, j, c] = 2.0 * n1 / den
    return S_np, dA_np, dB_np, dC_np


def ssim_backward(const double[:, :, ::1] x, const double[:, :, ::1] y, const double[:, ::1] w,
                  const double[:, :, ::1] dA, const double[:, :, ::1] dB, const double[:, :, ::1] dC):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    accA_np = np.zeros((H, W, C))
    accB_np = np.zeros((H, W, C))
    accC_np = np.zeros((H, W, C))
    cdef double[:, :, ::1] accA = accA_np
    cdef double[:, :, ::1] accB = accB_np
    cdef double[:, :, ::1] accC = accC_np
    out_np = np.empty((H, W, C))
    cdef double[:, :, ::1] out = out_np
    cdef Py_ssize_t i, j, c, di, dj, ii, jj
    cdef double ww, a, b, cc
    with nogil:
        for i in range(H):
            for j in range(W):
                ww = w[i, j]
                if ww == 0.0:
                    continue
                ww = ww / 9.0
                for di in range(-1, 2):
                    ii = _mirror(i + di, H)
                    for dj in range(-1, 2):
                        jj = _mirror(j + dj, W)
                        for c in range(C):
                            accA[ii, jj, c] += ww * dA[i, j, c]
                            accB[ii, jj, c] += ww * dB[i, j, c]
                            accC[ii, jj, c] += ww * dC[i, j, c]
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    out[i, j, c] = accA[i, j, c] + 2.0 * y[i, j, c] * accB[i, j, c] + x[i, j, c] * accC[i, j, c]
    return out_np
