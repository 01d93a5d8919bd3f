import numpy as np
import pytest
from scipy import ndimage

from fewbeam import synthetic as sy
from fewbeam.geometry import CameraIntrinsics


def textured(rng, shape, channels=3, sigma=1.0):
    """Smooth random texture in [0, 1]."""
    img = ndimage.gaussian_filter(rng.random(shape + (channels,)), (sigma, sigma, 0))
    img = (img - img.min()) / (img.max() - img.min())
    return img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_K():
    return CameraIntrinsics(14.0, 14.0, 7.5, 7.5, 16, 16)


@pytest.fixture(scope="session")
def bench_triplet():
    K = sy.default_intrinsics()
    return sy.make_triplet(sy.benchmark_scene(0), K, sy.DEFAULT_EGO, sy.four_beam_spec(), seed=0)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
