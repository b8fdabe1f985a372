#!/usr/bin/env python3
"""Benchmark the compiled block-grid kernels against the numpy fallback.

The kernels dominate the training inner loop and the finite-difference
gradient checks, where grids are tiny (4x4 .. 16x16) and per-call overhead
is what matters; larger sizes are included for completeness.

Usage:
    python benchmarks/bench_kernels.py [--repeats 20000]
"""

import argparse
import timeit

import numpy as np

from sdcount import _kernels_py

try:
    from sdcount import _kernels
except ImportError:
    _kernels = None

SIZES = (4, 8, 16, 64, 256)


def make_args(rng, name, n):
    g = np.ascontiguousarray(rng.uniform(0.0, 9.0, (n, n)))
    z = np.ascontiguousarray(rng.normal(0.0, 1.0, (n, n)))
    half = np.ascontiguousarray(rng.uniform(0.0, 9.0, (n // 2, n // 2)))
    w = np.ascontiguousarray(rng.uniform(0.0, 1.0, (n, n)))
    u = _kernels_py.spatial_softmax2(z)
    return {
        "kron_upsample2": (half,),
        "block_sum2": (g,),
        "spatial_softmax2": (z,),
        "spatial_softmax2_backward": (u, z),
        "guided_upsample": (half, u),
        "merge_step": (half, g, w, u),
        "gt_upsample_map": (half, g),
        "block_max2": (g,),
    }[name]


def bench(module, name, args, repeats):
    fn = getattr(module, name)
    return timeit.timeit(lambda: fn(*args), number=repeats) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20000)
    args = parser.parse_args()
    if _kernels is None:
        print("compiled extension not built; showing the fallback only")
    rng = np.random.default_rng(0)
    names = ["kron_upsample2", "block_sum2", "spatial_softmax2",
             "spatial_softmax2_backward", "guided_upsample", "merge_step",
             "gt_upsample_map", "block_max2"]
    header = f"{'kernel':>26} {'size':>5} {'python':>10} {'cython':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name in names:
        for n in SIZES:
            reps = max(100, args.repeats // (1 + n * n // 64))
            call_args = make_args(rng, name, n)
            t_py = bench(_kernels_py, name, call_args, reps)
            if _kernels is None:
                print(f"{name:>26} {n:>4}px {t_py * 1e6:>8.2f}us {'-':>10} {'-':>8}")
                continue
            t_cy = bench(_kernels, name, call_args, reps)
            print(f"{name:>26} {n:>4}px {t_py * 1e6:>8.2f}us "
                  f"{t_cy * 1e6:>8.2f}us {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
