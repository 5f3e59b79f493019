"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The numba path is the default. Setting the environment variable
``ATLASFLOW_NO_NUMBA=1`` (before import) selects the pure-numpy fallback,
which produces identical results. ``benchmarks/bench_kernels.py`` compares
the two paths.

All kernels are deterministic: parallel loops only write disjoint output
slots, reductions happen afterwards in a fixed order.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("ATLASFLOW_NO_NUMBA", "0") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False


def _nn_sqdist_numpy(a: np.ndarray, b: np.ndarray, block: int = 1024) -> np.ndarray:
    """Squared distance from each row of ``a`` to its nearest row of ``b``."""
    b_sq = np.einsum("ij,ij->i", b, b)
    out = np.empty(len(a))
    for start in range(0, len(a), block):
        chunk = a[start : start + block]
        d2 = (
            np.einsum("ij,ij->i", chunk, chunk)[:, None]
            - 2.0 * chunk @ b.T
            + b_sq[None, :]
        )
        out[start : start + block] = d2.min(axis=1)
    # Guard against tiny negative values from cancellation.
    np.maximum(out, 0.0, out=out)
    return out


def _pairwise_dist_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


if USE_NUMBA:

    @njit(parallel=True, cache=True)
    def _nn_sqdist_numba(a, b):  # pragma: no cover - exercised via wrapper
        n, d = a.shape
        m = b.shape[0]
        out = np.empty(n)
        for i in prange(n):
            best = np.inf
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    acc += diff * diff
                if acc < best:
                    best = acc
            out[i] = best
        return out

    @njit(parallel=True, cache=True)
    def _pairwise_dist_numba(a, b):  # pragma: no cover - exercised via wrapper
        n, d = a.shape
        m = b.shape[0]
        out = np.empty((n, m))
        for i in prange(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    acc += diff * diff
                out[i, j] = np.sqrt(acc)
        return out


def nn_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point in ``a``, squared Euclidean distance to the nearest point in ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_NUMBA:
        return _nn_sqdist_numba(a, b)
    return _nn_sqdist_numpy(a, b)


def pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense matrix of Euclidean (non-squared) distances between two point sets."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_NUMBA:
        return _pairwise_dist_numba(a, b)
    return _pairwise_dist_numpy(a, b)


def set_num_threads(n: int) -> None:
    """Cap kernel parallelism. ``n=1`` makes the numba path fully sequential."""
    if USE_NUMBA:
        numba.set_num_threads(max(1, int(n)))
