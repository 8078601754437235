"""Hot numeric kernels with an optional numba path.

Set ``MEMFOREST_DISABLE_NUMBA=1`` to force the pure-numpy implementations.
Both paths return identical rankings; the numba scorer accumulates each dot
product strictly left to right, the numpy one uses BLAS.
"""

from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("MEMFOREST_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by MEMFOREST_DISABLE_NUMBA")
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def cosine_scores_numpy(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    if matrix.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    return matrix @ query


def _cosine_scores_loop(matrix, query):
    n, d = matrix.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += matrix[i, j] * query[j]
        out[i] = acc
    return out


def _top_candidates_loop(scores, k):
    # indices of all rows scoring >= the k-th best score (ties at the cutoff kept)
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    cutoff = np.partition(scores, n - k)[n - k]
    count = 0
    for i in range(n):
        if scores[i] >= cutoff:
            count += 1
    out = np.empty(count, dtype=np.int64)
    c = 0
    for i in range(n):
        if scores[i] >= cutoff:
            out[c] = i
            c += 1
    return out


def top_candidates_numpy(scores: np.ndarray, k: int) -> np.ndarray:
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    cutoff = np.partition(scores, n - k)[n - k]
    return np.nonzero(scores >= cutoff)[0]


if HAS_NUMBA:
    cosine_scores_numba = numba.njit(cache=True)(_cosine_scores_loop)
    top_candidates_numba = numba.njit(cache=True)(_top_candidates_loop)
    cosine_scores = cosine_scores_numba
    top_candidates = top_candidates_numba
else:
    cosine_scores_numba = None
    top_candidates_numba = None
    cosine_scores = cosine_scores_numpy
    top_candidates = top_candidates_numpy


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"


def unit(vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n
