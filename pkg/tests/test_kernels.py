"""Compiled and pure-numpy kernels must agree."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewbeam import kernels, _pykernels
from fewbeam.losses import SSIM_C1, SSIM_C2

needs_cython = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")


@needs_cython
class TestBackendParity:
    def test_bilinear_sample(self, rng):
        img = rng.random((13, 17, 3))
        u = rng.uniform(-2, 18, (9, 11))
        v = rng.uniform(-2, 14, (9, 11))
        u[0, 0] = np.nan
        u[1, 1], v[1, 1] = 16.0, 12.0  # exact far corner
        a = kernels.bilinear_sample(img, u, v, backend="python")
        b = kernels.bilinear_sample(img, u, v, backend="cython")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_zbuffer(self, rng):
        rows = rng.integers(0, 6, 200)
        cols = rng.integers(0, 7, 200)
        d = rng.uniform(1, 50, 200)
        np.testing.assert_array_equal(
            kernels.zbuffer_scatter(rows, cols, d, 6, 7, backend="python"),
            kernels.zbuffer_scatter(rows, cols, d, 6, 7, backend="cython"),
        )

    @pytest.mark.parametrize("k", [1, 2, 3, 4, 10])
    def test_min_dilate(self, rng, k):
        H = np.where(rng.random((20, 23)) < 0.05, rng.uniform(1, 50, (20, 23)), 0.0)
        np.testing.assert_array_equal(kernels.min_dilate(H, k, backend="python"), kernels.min_dilate(H, k, backend="cython"))

    def test_ssim(self, rng):
        x, y = rng.random((9, 12, 3)), rng.random((9, 12, 3))
        a = kernels.ssim_partials(x, y, SSIM_C1, SSIM_C2, backend="python")
        b = kernels.ssim_partials(x, y, SSIM_C1, SSIM_C2, backend="cython")
        for p, q in zip(a, b):
            np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-12)
        w = rng.random((9, 12))
        ga = kernels.ssim_backward(x, y, w, *a[1:], backend="python")
        gb = kernels.ssim_backward(x, y, w, *b[1:], backend="cython")
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.min_dilate(np.zeros((3, 3)), 3, backend="fortran")


def test_bilinear_integer_coordinates_reproduce_image(rng):
    img = rng.random((5, 6, 2))
    v, u = np.mgrid[0:5, 0:6].astype(float)
    out, _, _, valid = kernels.bilinear_sample(img, u, v)
    assert valid.all()
    np.testing.assert_allclose(out, img, atol=1e-15)


def test_bilinear_derivatives_on_a_ramp():
    v, u = np.mgrid[0:6, 0:7].astype(float)
    img = (2.0 * u + 3.0 * v)[..., None]
    out, gu, gv, _ = kernels.bilinear_sample(img, np.array([[2.3]]), np.array([[4.6]]))
    assert out[0, 0, 0] == pytest.approx(2 * 2.3 + 3 * 4.6)
    assert (gu[0, 0, 0], gv[0, 0, 0]) == pytest.approx((2.0, 3.0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 7))
def test_min_dilate_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    H = np.where(rng.random((9, 11)) < 0.15, rng.uniform(1, 9, (9, 11)), 0.0)
    out = kernels.min_dilate(H, k)
    lo, hi = k // 2, k - 1 - k // 2
    for i in range(9):
        for j in range(11):
            win = H[max(0, i - lo) : i + hi + 1, max(0, j - lo) : j + hi + 1]
            pos = win[win > 0]
            assert out[i, j] == (pos.min() if pos.size else 0.0)


def test_ssim_backward_is_adjoint(rng):
    """<w, dS/dy . e> equals <ssim_backward(w), e> (checked by finite differences)."""
    x, y = rng.random((7, 8, 1)), rng.random((7, 8, 1))
    w = rng.random((7, 8))
    e = rng.normal(size=y.shape)
    parts = _pykernels.ssim_partials(x, y, SSIM_C1, SSIM_C2)
    g = _pykernels.ssim_backward(x, y, w, *parts[1:])
    h = 1e-6
    Sp = _pykernels.ssim_partials(x, y + h * e, SSIM_C1, SSIM_C2)[0]
    Sm = _pykernels.ssim_partials(x, y - h * e, SSIM_C1, SSIM_C2)[0]
    fd = (w[..., None] * (Sp - Sm)).sum() / (2 * h)
    assert (g * e).sum() == pytest.approx(fd, rel=1e-6)
