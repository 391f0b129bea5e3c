"""Deterministic float64 kernels: matmul, sentinel-aware softmax, scaling, top-k.

Every kernel exists twice: a numba-compiled loop (``*_nb``) and a numpy
version (``*_np``) with the same reduction order. The public functions
dispatch to one of them according to :data:`pandora._jit.BACKEND`.

The exclusion sentinel is ``-inf``. It is tested for explicitly before any
exponentiation so that ``-inf - (-inf)`` never produces NaN.
"""
from __future__ import annotations

import math

import numpy as np

from . import _jit
from ._jit import optional_njit
from .errors import AllExcluded, ShapeError

NEG_INF = -np.inf

__all__ = [
    "NEG_INF",
    "as_matrix",
    "matmul",
    "scale",
    "softmax_row",
    "softmax_rows",
    "topk_row",
    "dissolve_rows",
    "backend",
]


def backend() -> str:
    return _jit.BACKEND


def as_matrix(a, name="matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting NaN."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if np.isnan(m).any():
        raise ValueError(f"{name} contains NaN")
    return m


# --------------------------------------------------------------------------
# matmul


@optional_njit(cache=True)
def _matmul_nb(a, b):
    n, m = a.shape
    p = b.shape[1]
    bt = np.ascontiguousarray(b.T)
    out = np.empty((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += a[i, k] * bt[j, k]
            out[i, j] = acc
    return out


def _matmul_np(a, b):
    # accumulate over the inner index in increasing order, like the loop kernel
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if _jit.USE_NUMBA:
        return _matmul_nb(a, b)
    return _matmul_np(a, b)


# --------------------------------------------------------------------------
# scale


def scale(a, s: float) -> np.ndarray:
    """Multiply every non-sentinel entry by ``s``; sentinels stay ``-inf``."""
    if not math.isfinite(s) or s == 0.0:
        raise ValueError(f"scale factor must be finite and nonzero, got {s}")
    a = as_matrix(a)
    out = a * s
    # a negative factor would flip -inf to +inf
    out[a == NEG_INF] = NEG_INF
    return out


# --------------------------------------------------------------------------
# softmax


@optional_njit(cache=True)
def _softmax_rows_nb(x):
    n, m = x.shape
    out = np.zeros((n, m))
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            v = x[i, j]
            if v != -np.inf and v > mx:
                mx = v
        if mx == -np.inf:
            return out, i
        s = 0.0
        for j in range(m):
            v = x[i, j]
            if v != -np.inf:
                e = math.exp(v - mx)
                out[i, j] = e
                s += e
        for j in range(m):
            out[i, j] = out[i, j] / s
    return out, -1


def _softmax_rows_np(x):
    n, m = x.shape
    keep = x != NEG_INF
    alive = keep.any(axis=1)
    if not alive.all():
        return np.zeros((n, m)), int(np.argmin(alive))
    mx = np.where(keep, x, NEG_INF).max(axis=1, keepdims=True)
    e = np.zeros((n, m))
    np.exp(x - mx, out=e, where=keep)
    s = np.zeros(n)
    for j in range(m):
        s += e[:, j]
    return e / s[:, None], -1


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax; ``-inf`` entries map to exactly 0.0.

    Raises :class:`AllExcluded` naming the first row that is all sentinels.
    """
    x = as_matrix(x)
    if x.shape[1] == 0:
        raise AllExcluded(0 if x.shape[0] else None)
    if _jit.USE_NUMBA:
        out, bad = _softmax_rows_nb(x)
    else:
        out, bad = _softmax_rows_np(x)
    if bad >= 0:
        raise AllExcluded(bad)
    return out


def softmax_row(row) -> np.ndarray:
    r = np.asarray(row, dtype=np.float64)
    if r.ndim != 1:
        raise ShapeError("softmax_row expects a vector")
    try:
        return softmax_rows(r[None, :])[0]
    except AllExcluded:
        raise AllExcluded() from None


# --------------------------------------------------------------------------
# top-k with lower-index tie break


@optional_njit(cache=True)
def _topk_row_nb(row, k):
    order = np.argsort(-row, kind="mergesort")
    return np.sort(order[:k])


def _topk_row_np(row, k):
    order = np.argsort(-row, kind="stable")
    return np.sort(order[:k])


def topk_row(row, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest entries; ties go to the lower index."""
    r = np.ascontiguousarray(row, dtype=np.float64)
    if r.ndim != 1:
        raise ShapeError("topk_row expects a vector")
    if k < 0 or k > r.shape[0]:
        raise ValueError(f"k={k} outside [0, {r.shape[0]}]")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if _jit.USE_NUMBA:
        return _topk_row_nb(r, np.int64(k))
    return _topk_row_np(r, k)


# --------------------------------------------------------------------------
# PAD dissolution over a block of rows


@optional_njit(cache=True)
def _dissolve_rows_nb(s, rows, key_excluded, k):
    n, m = s.shape
    out = s.copy()
    dissolved = np.zeros((n, m), dtype=np.bool_)
    weights, bad = _softmax_rows_nb(s[rows])
    if bad >= 0:
        return out, dissolved, rows[bad]
    for r in range(rows.shape[0]):
        i = rows[r]
        if k > 0:
            order = np.argsort(-weights[r], kind="mergesort")
            for q in range(k):
                dissolved[i, order[q]] = True
        survivors = 0
        for j in range(m):
            if key_excluded[j]:
                dissolved[i, j] = True
            if dissolved[i, j]:
                out[i, j] = -np.inf
            elif out[i, j] != -np.inf:
                survivors += 1
        if survivors == 0:
            return out, dissolved, i
    return out, dissolved, -1


def _dissolve_rows_np(s, rows, key_excluded, k):
    n, m = s.shape
    out = s.copy()
    dissolved = np.zeros((n, m), dtype=bool)
    if rows.size == 0:
        return out, dissolved, -1
    weights, bad = _softmax_rows_np(s[rows])
    if bad >= 0:
        return out, dissolved, int(rows[bad])
    if k > 0:
        order = np.argsort(-weights, axis=1, kind="stable")[:, :k]
        dissolved[rows[:, None], order] = True
    dissolved[np.ix_(rows, key_excluded)] = True
    out[dissolved] = NEG_INF
    alive = (out[rows] != NEG_INF).any(axis=1)
    if not alive.all():
        return out, dissolved, int(rows[np.argmin(alive)])
    return out, dissolved, -1


def dissolve_rows(s, rows, key_excluded, k: int):
    """Sentinel out, for each listed row, its top-``k`` keys and every excluded key.

    Top-k is taken over the softmax of the ORIGINAL row. Returns
    ``(s_diss, dissolved, bad_row)`` where ``dissolved`` is a boolean matrix and
    ``bad_row`` is the first row left with no finite entry (``-1`` if none).
    """
    s = as_matrix(s)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    key_excluded = np.ascontiguousarray(key_excluded, dtype=np.bool_)
    if key_excluded.shape != (s.shape[1],):
        raise ShapeError("key_excluded must have one flag per column")
    if not 0 <= k <= s.shape[1]:
        raise ValueError(f"k={k} outside [0, {s.shape[1]}]")
    if _jit.USE_NUMBA:
        out, dissolved, bad = _dissolve_rows_nb(s, rows, key_excluded, np.int64(k))
    else:
        out, dissolved, bad = _dissolve_rows_np(s, rows, key_excluded, k)
    return out, dissolved, int(bad)
