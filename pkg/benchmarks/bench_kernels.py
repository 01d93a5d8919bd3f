"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--size HxW]

Each kernel runs on identical inputs under both backends; the script
prints the best-of-N wall time per call, the speed-up and the maximum
absolute difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from fewbeam import kernels


def cases(h: int, w: int, rng):
    img = rng.random((h, w, 3))
    u = rng.uniform(-2, w + 1, (h, w))
    v = rng.uniform(-2, h + 1, (h, w))
    y = rng.random((h, w, 3))
    wgt = rng.random((h, w))
    parts = kernels.ssim_partials(img, y, 1e-4, 9e-4, backend="python")[1:]
    n = h * w // 4
    rows, cols = rng.integers(0, h, n), rng.integers(0, w, n)
    depths = rng.uniform(1, 80, n)
    sparse = np.where(rng.random((h, w)) < 0.05, rng.uniform(1, 80, (h, w)), 0.0)
    return {
        "bilinear_sample": lambda b: kernels.bilinear_sample(img, u, v, backend=b),
        "ssim_partials": lambda b: kernels.ssim_partials(img, y, 1e-4, 9e-4, backend=b),
        "ssim_backward": lambda b: kernels.ssim_backward(img, y, wgt, *parts, backend=b),
        "zbuffer_scatter": lambda b: kernels.zbuffer_scatter(rows, cols, depths, h, w, backend=b),
        "min_dilate": lambda b: kernels.min_dilate(sparse, 10, backend=b),
    }


def max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    parser.add_argument("--size", default="96x320", help="image size HxW")
    args = parser.parse_args(argv)
    h, w = (int(x) for x in args.size.lower().split("x"))
    try:
        from fewbeam import _ckernels  # noqa: F401
    except ImportError:
        print("compiled extension not built; run: pip install -e . --no-build-isolation")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'python ms':>11}{'cython ms':>11}{'speed-up':>10}{'max diff':>11}")
    for name, fn in cases(h, w, rng).items():
        t = {}
        for b in ("python", "cython"):
            number = 3
            t[b] = min(timeit.repeat(lambda: fn(b), number=number, repeat=args.repeat)) / number * 1e3
        diff = max_diff(fn("python"), fn("cython"))
        print(f"{name:<18}{t['python']:>11.3f}{t['cython']:>11.3f}{t['python'] / t['cython']:>9.1f}x{diff:>11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
