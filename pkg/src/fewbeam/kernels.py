"""Backend selection for the hot inner loops.

The compiled extension ``fewbeam._ckernels`` is used when it imports; the
numpy implementation in :mod:`fewbeam._pykernels` is the fallback. Setting
``FEWBEAM_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FEWBEAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def bilinear_sample(image, u, v, backend=None):
    impl = _pick(backend)
    image = np.ascontiguousarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    return impl.bilinear_sample(
        image,
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
    )


def zbuffer_scatter(rows, cols, depths, height, width, backend=None):
    impl = _pick(backend)
    return impl.zbuffer_scatter(
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(depths, dtype=np.float64),
        int(height),
        int(width),
    )


def min_dilate(sparse, kernel_side, backend=None):
    impl = _pick(backend)
    return impl.min_dilate(np.ascontiguousarray(sparse, dtype=np.float64), int(kernel_side))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def ssim_partials(x, y, c1, c2, backend=None):
    impl = _pick(backend)
    return impl.ssim_partials(_c3(x), _c3(y), float(c1), float(c2))


def ssim_backward(x, y, w, dA, dB, dC, backend=None):
    impl = _pick(backend)
    return impl.ssim_backward(_c3(x), _c3(y), np.ascontiguousarray(w, dtype=np.float64), _c3(dA), _c3(dB), _c3(dC))


def _c3(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a
