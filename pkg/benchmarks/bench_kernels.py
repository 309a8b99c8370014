#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallbacks.

Runs the convolution forward/backward kernels at the production shapes
(the flattened electrode batch of a pre-training step) plus the resampler,
and prints a per-kernel timing table.  Usage:

    python benchmarks/bench_kernels.py [--repeats 20]
"""

import argparse
import time

import numpy as np

from topomoe._kernels import pykernels

try:
    from topomoe._kernels import cykernels
except ImportError:
    cykernels = None


def bench(fn, args, repeats):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    # shapes from a nano pre-training step: 160 electrode series, conv stack
    x1 = np.ascontiguousarray(rng.normal(size=(160, 1, 400)).astype(np.float32))
    w1 = np.ascontiguousarray(rng.normal(size=(16, 1, 7)).astype(np.float32))
    x2 = np.ascontiguousarray(rng.normal(size=(160, 16, 197)).astype(np.float32))
    w2 = np.ascontiguousarray(rng.normal(size=(32, 16, 7)).astype(np.float32))
    g2 = np.ascontiguousarray(rng.normal(size=(160, 32, 96)).astype(np.float32))
    sig = np.ascontiguousarray(rng.normal(size=25600))

    cases = [
        ("conv1d fwd   (160,1,400)x(16,1,7)", "conv1d_forward", (x1, w1, 2)),
        ("conv1d fwd   (160,16,197)x(32,16,7)", "conv1d_forward", (x2, w2, 2)),
        ("conv1d dgrad (160,32,96)", "conv1d_grad_input", (g2, w2, 2, 197)),
        ("conv1d wgrad (160,32,96)", "conv1d_grad_weight", (g2, x2, 2, 7)),
        ("sinc resample 25600 @ 1.28", "resample_sinc", (sig, 1.28, 20000, 16)),
    ]

    print(f"{'kernel':<38} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for label, name, call_args in cases:
        t_py = bench(getattr(pykernels, name), call_args, args.repeats)
        if cykernels is None:
            print(f"{label:<38} {t_py * 1e3:>8.2f}ms {'n/a':>10} {'':>8}")
            continue
        t_cy = bench(getattr(cykernels, name), call_args, args.repeats)
        print(f"{label:<38} {t_py * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
              f"{t_py / t_cy:>7.1f}x")

    if cykernels is None:
        print("\ncompiled kernels unavailable; "
              "build with: pip install -e . --no-build-isolation")


if __name__ == "__main__":
    main()
