"""Hot numeric kernels with numba-compiled and pure-numpy twins.

The compiled path is used when numba imports cleanly and the environment
variable ``CONAL_DISABLE_NUMBA`` is unset (any of ``1/true/yes`` disables it).
Dispatch happens at call time, so tests and benchmarks can force either path
with :func:`use_numba`. Both twins implement the same arithmetic; outputs
agree to floating-point roundoff (see ``benchmarks/bench_kernels.py``).

Only the loop-dominated kernels carry compiled twins. ``max_dot`` is
matmul-bound and stays on BLAS: a fused numba version benchmarks no faster
than the chunked numpy expression it would replace.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return decorator


_FORCED: bool | None = None


def _env_disabled() -> bool:
    return os.environ.get("CONAL_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


def numba_active() -> bool:
    """True when the compiled kernel path will be taken."""
    if _FORCED is not None:
        return _FORCED and HAS_NUMBA
    return HAS_NUMBA and not _env_disabled()


@contextmanager
def use_numba(enabled: bool):
    """Force the compiled (True) or pure-numpy (False) path within the block."""
    global _FORCED
    previous = _FORCED
    _FORCED = bool(enabled)
    try:
        yield
    finally:
        _FORCED = previous


# ---------------------------------------------------------------------------
# greedy k-center selection
# ---------------------------------------------------------------------------


def _kcenter_numpy(points: np.ndarray, min_sq_dist: np.ndarray, m: int) -> np.ndarray:
    picks = np.empty(m, dtype=np.int64)
    current = min_sq_dist.copy()
    for j in range(m):
        idx = int(np.argmax(current))
        picks[j] = idx
        diff = points - points[idx]
        np.minimum(current, np.einsum("nd,nd->n", diff, diff), out=current)
    return picks


@njit(cache=True)
def _kcenter_njit(points, min_sq_dist, m):  # pragma: no cover - exercised via dispatch
    n, d = points.shape
    picks = np.empty(m, dtype=np.int64)
    current = min_sq_dist.copy()
    for j in range(m):
        best = 0
        best_val = current[0]
        for i in range(1, n):
            if current[i] > best_val:
                best_val = current[i]
                best = i
        picks[j] = best
        for i in range(n):
            acc = 0.0
            for c in range(d):
                delta = points[i, c] - points[best, c]
                acc += delta * delta
            if acc < current[i]:
                current[i] = acc
    return picks


def kcenter_greedy(points: np.ndarray, min_sq_dist: np.ndarray, m: int) -> np.ndarray:
    """Pick ``m`` row indices by farthest-point traversal.

    ``min_sq_dist`` holds each row's squared distance to its nearest existing
    center; rows already covered exactly (distance 0) are never re-picked.
    Ties go to the lowest row index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    min_sq_dist = np.ascontiguousarray(min_sq_dist, dtype=np.float64)
    if numba_active():
        return _kcenter_njit(points, min_sq_dist, m)
    return _kcenter_numpy(points, min_sq_dist, m)


# ---------------------------------------------------------------------------
# maximum dot product against a reference set (BLAS-bound, numpy only)
# ---------------------------------------------------------------------------


def max_dot(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Row-wise max of ``queries @ refs.T``; refs must be nonempty."""
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    refs = np.ascontiguousarray(refs, dtype=np.float64)
    if refs.shape[0] == 0:
        raise ValueError("reference set is empty")
    out = np.empty(queries.shape[0], dtype=np.float64)
    # chunk the matmul so the intermediate stays ~32 MB
    chunk = max(1, int(4e6) // refs.shape[0])
    for start in range(0, queries.shape[0], chunk):
        block = queries[start : start + chunk]
        out[start : start + chunk] = (block @ refs.T).max(axis=1)
    return out


# ---------------------------------------------------------------------------
# confidence-bin accumulation for calibration error
# ---------------------------------------------------------------------------


def _bin_stats_numpy(conf, correct, n_bins):
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sums = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sums = np.bincount(idx, weights=correct, minlength=n_bins)
    return counts, acc_sums, conf_sums


@njit(cache=True)
def _bin_stats_njit(conf, correct, n_bins):  # pragma: no cover - exercised via dispatch
    counts = np.zeros(n_bins, dtype=np.float64)
    acc_sums = np.zeros(n_bins, dtype=np.float64)
    conf_sums = np.zeros(n_bins, dtype=np.float64)
    for i in range(conf.shape[0]):
        b = int(conf[i] * n_bins)
        if b >= n_bins:
            b = n_bins - 1
        counts[b] += 1.0
        acc_sums[b] += correct[i]
        conf_sums[b] += conf[i]
    return counts, acc_sums, conf_sums


def confidence_bin_stats(conf: np.ndarray, correct: np.ndarray, n_bins: int):
    """Per-bin (count, sum of correctness, sum of confidence) over equal-width bins.

    Bin b covers [b/n_bins, (b+1)/n_bins); confidence 1.0 lands in the last bin.
    """
    conf = np.ascontiguousarray(conf, dtype=np.float64)
    correct = np.ascontiguousarray(correct, dtype=np.float64)
    if numba_active():
        return _bin_stats_njit(conf, correct, n_bins)
    return _bin_stats_numpy(conf, correct, n_bins)
