"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run twice to compare paths:

    python benchmarks/bench_kernels.py
    ATLASFLOW_NO_NUMBA=1 python benchmarks/bench_kernels.py

The first numba call includes JIT compilation; a warmup call is excluded
from the timings.
"""

from __future__ import annotations

import time

import numpy as np

from atlasflow import _kernels


def bench(fn, *args, repeats=5):
    fn(*args)  # warmup / JIT
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    rng = np.random.default_rng(0)
    path = "numba" if _kernels.USE_NUMBA else "numpy"
    print(f"kernel path: {path}")

    for n, m in ((2_000, 2_000), (20_000, 20_000), (100_000, 20_000)):
        a = rng.uniform(-1, 1, (n, 3))
        b = rng.uniform(-1, 1, (m, 3))
        t = bench(_kernels.nn_sqdist, a, b)
        print(f"nn_sqdist   {n:>7} x {m:>7}: {t * 1e3:9.2f} ms")

    for n in (256, 1024, 2048):
        a = rng.uniform(-1, 1, (n, 3))
        b = rng.uniform(-1, 1, (n, 3))
        t = bench(_kernels.pairwise_dist, a, b)
        print(f"pairwise    {n:>7} x {n:>7}: {t * 1e3:9.2f} ms")

    # Consistency between the two implementations.
    a = rng.uniform(-1, 1, (500, 3))
    b = rng.uniform(-1, 1, (400, 3))
    assert np.allclose(_kernels.nn_sqdist(a, b), _kernels._nn_sqdist_numpy(a, b))
    assert np.allclose(_kernels.pairwise_dist(a, b), _kernels._pairwise_dist_numpy(a, b))
    print("paths agree on random inputs")


if __name__ == "__main__":
    main()
