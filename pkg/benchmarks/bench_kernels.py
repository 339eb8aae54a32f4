#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against their pure-numpy twins.

Runs each hot kernel on a few problem sizes with both backends, checks that
the outputs agree, and prints a timing table. The same switch the benchmark
uses is available at runtime via the CONAL_DISABLE_NUMBA environment variable.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from conal import kernels


def best_of(func, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_case(name, make_args, run, agree, repeats):
    args = make_args()
    with kernels.use_numba(True):
        run(*args)  # JIT warmup
        numba_s = best_of(lambda: run(*args), repeats)
        out_numba = run(*args)
    with kernels.use_numba(False):
        numpy_s = best_of(lambda: run(*args), repeats)
        out_numpy = run(*args)
    max_dev = agree(out_numba, out_numpy)
    print(f"{name:<42} numpy {numpy_s * 1e3:9.2f} ms   numba {numba_s * 1e3:9.2f} ms"
          f"   speedup {numpy_s / numba_s:6.2f}x   max|delta| {max_dev:.2e}")
    return max_dev


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    worst = 0.0

    for n, m in ((2000, 200), (10_000, 1000)):
        points = rng.standard_normal((n, 32))

        def make():
            seeds = rng.standard_normal((8, 32))
            d2 = ((points[:, None, :] - seeds[None]) ** 2).sum(axis=2).min(axis=1)
            return points, d2, m

        worst = max(worst, bench_case(
            f"kcenter_greedy n={n} m={m}", make,
            kernels.kcenter_greedy,
            lambda a, b: float(np.abs(a - b).max()), args.repeats))

    # max_dot is BLAS-bound and deliberately has no compiled twin; time it
    # once per backend setting to confirm the dispatch costs nothing
    for n, r in ((20_000, 2000),):
        queries = rng.standard_normal((n, 32))
        refs = rng.standard_normal((r, 32))
        refs /= np.linalg.norm(refs, axis=1, keepdims=True)
        secs = best_of(lambda: kernels.max_dot(queries, refs), args.repeats)
        print(f"{f'max_dot n={n} refs={r} (numpy/BLAS only)':<42} "
              f"numpy {secs * 1e3:9.2f} ms")

    for n in (10_000, 100_000):
        conf = rng.uniform(0.1, 1.0, size=n)
        correct = (rng.random(n) < conf).astype(np.float64)
        worst = max(worst, bench_case(
            f"confidence_bin_stats n={n}", lambda c=conf, k=correct: (c, k, 15),
            kernels.confidence_bin_stats,
            lambda a, b: float(max(np.abs(x - y).max() for x, y in zip(a, b))),
            args.repeats))

    print(f"\nworst backend disagreement: {worst:.2e}")
    if worst > 1e-9:
        raise SystemExit("backends disagree beyond tolerance")


if __name__ == "__main__":
    main()
