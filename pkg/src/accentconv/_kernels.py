"""Hot inner loops: Levenshtein distance, DTW and overlap-add.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. The numba path is used when numba imports and the
``AC_DISABLE_NUMBA`` environment variable is unset (or "0"). Both paths are
always importable as ``*_numba`` / ``*_numpy`` so tests and the benchmark can
compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("AC_DISABLE_NUMBA", "0") in ("", "0")

njit_kwargs = {"cache": True, "nogil": True}


# --------------------------------------------------------------------------
# numpy reference paths


def levenshtein_numpy(a: np.ndarray, b: np.ndarray) -> int:
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    cols = np.arange(m + 1, dtype=np.int64)
    prev = cols.copy()
    for i in range(1, n + 1):
        sub = prev[:-1] + (b != a[i - 1])
        dele = prev[1:] + 1
        tmp = np.empty(m + 1, dtype=np.int64)
        tmp[0] = i
        tmp[1:] = np.minimum(sub, dele)
        # insertions: row[j] = min_k<=j tmp[k] + (j - k)
        prev = np.minimum.accumulate(tmp - cols) + cols
    return int(prev[m])


def dtw_numpy(cost: np.ndarray) -> float:
    """Symmetric-step DTW total cost (diagonal steps weigh 2x)."""
    n, m = cost.shape
    prev = np.empty(m, dtype=np.float64)
    prev[0] = cost[0, 0]
    prev[1:] = cost[0, 0] + np.cumsum(cost[0, 1:])
    for i in range(1, n):
        c = cost[i]
        tmp = np.empty(m, dtype=np.float64)
        tmp[0] = prev[0] + c[0]
        tmp[1:] = np.minimum(prev[:-1] + 2.0 * c[1:], prev[1:] + c[1:])
        # horizontal steps: row[j] = min_k<=j tmp[k] + sum(c[k+1..j])
        csum = np.cumsum(c)
        prev = np.minimum.accumulate(tmp - csum) + csum
    return float(prev[m - 1])


def overlap_add_numpy(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    n_frames, n_fft = frames.shape
    out = np.zeros(length, dtype=np.float64)
    for t in range(n_frames):
        out[t * hop : t * hop + n_fft] += frames[t]
    return out


# --------------------------------------------------------------------------
# numba paths

if HAS_NUMBA:

    @nb.njit(**njit_kwargs)
    def levenshtein_numba(a, b):
        n, m = len(a), len(b)
        if n == 0:
            return m
        if m == 0:
            return n
        prev = np.arange(m + 1).astype(np.int64)
        cur = np.empty(m + 1, dtype=np.int64)
        for i in range(1, n + 1):
            cur[0] = i
            ai = a[i - 1]
            for j in range(1, m + 1):
                best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
                if prev[j] + 1 < best:
                    best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                cur[j] = best
            prev, cur = cur, prev
        return prev[m]

    @nb.njit(**njit_kwargs)
    def dtw_numba(cost):
        n, m = cost.shape
        acc = np.empty((n, m), dtype=np.float64)
        acc[0, 0] = cost[0, 0]
        for j in range(1, m):
            acc[0, j] = acc[0, j - 1] + cost[0, j]
        for i in range(1, n):
            acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
            for j in range(1, m):
                c = cost[i, j]
                best = acc[i - 1, j - 1] + 2.0 * c
                if acc[i - 1, j] + c < best:
                    best = acc[i - 1, j] + c
                if acc[i, j - 1] + c < best:
                    best = acc[i, j - 1] + c
                acc[i, j] = best
        return acc[n - 1, m - 1]

    @nb.njit(**njit_kwargs)
    def overlap_add_numba(frames, hop, length):
        n_frames, n_fft = frames.shape
        out = np.zeros(length, dtype=np.float64)
        for t in range(n_frames):
            base = t * hop
            for k in range(n_fft):
                out[base + k] += frames[t, k]
        return out

else:  # pragma: no cover
    levenshtein_numba = levenshtein_numpy
    dtw_numba = dtw_numpy
    overlap_add_numba = overlap_add_numpy


def levenshtein(a: np.ndarray, b: np.ndarray) -> int:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if USE_NUMBA:
        return int(levenshtein_numba(a, b))
    return levenshtein_numpy(a, b)


def dtw(cost: np.ndarray) -> float:
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise ValueError(f"dtw needs a non-empty 2-D cost matrix, got shape {cost.shape}")
    if USE_NUMBA:
        return float(dtw_numba(cost))
    return dtw_numpy(cost)


def overlap_add(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if USE_NUMBA:
        return overlap_add_numba(frames, int(hop), int(length))
    return overlap_add_numpy(frames, hop, length)
