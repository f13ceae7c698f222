"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Both variants are called directly, so the DCDM_DISABLE_NUMBA flag does not matter
here. The first numba call (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from dcdm import kernels
from dcdm._accel import HAVE_NUMBA


def _time(fn, *args, repeat=20):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    n = 64
    params = np.column_stack([
        rng.uniform(-0.3, 0.3, 6), rng.uniform(-0.3, 0.3, 6), rng.uniform(0.1, 0.7, 6),
        rng.uniform(0.1, 0.7, 6), rng.uniform(0, np.pi, 6), rng.uniform(0.1, 1, 6),
        np.full(6, 0.02),
    ])
    a = rng.random((256, 256))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    flat = rng.standard_normal(1 << 18)
    return [
        ("rasterize_ellipses 64x64x6", kernels.rasterize_ellipses_numba, kernels.rasterize_ellipses_numpy,
         (n, n, params)),
        ("rasterize_ellipses 256x256x6", kernels.rasterize_ellipses_numba, kernels.rasterize_ellipses_numpy,
         (256, 256, params)),
        ("ssim_map 256x256 win7", kernels.ssim_map_numba, kernels.ssim_map_numpy,
         (a, b, 7, 1e-4, 9e-4)),
        ("soft_threshold 262144", kernels.soft_threshold_numba, kernels.soft_threshold_numpy,
         (flat, 0.3)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  max|diff|")
    for name, fast, slow, args_ in cases(rng):
        ref = slow(*args_)
        got = fast(*args_)  # compile
        diff = float(np.max(np.abs(np.asarray(got) - np.asarray(ref))))
        tn = _time(fast, *args_, repeat=args.repeat)
        tp = _time(slow, *args_, repeat=args.repeat)
        print(f"{name:32s} {tn * 1e3:10.3f} {tp * 1e3:10.3f} {tp / tn:8.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()
