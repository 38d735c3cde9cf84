"""Deterministic dense kernels shared by every other module.

All public functions take and return float32 ``numpy`` arrays. ``matmul``
accumulates over the inner dimension in a fixed order, so row ``i`` of the
product depends only on row ``i`` of the left operand and is bitwise
reproducible regardless of how many rows are computed together.
"""

from __future__ import annotations

import numba
import numpy as np

from .exceptions import ShapeError

DTYPE = np.float32


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a C-contiguous 2-D float32 array."""
    arr = np.ascontiguousarray(a, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    return arr


@numba.njit(cache=True, nogil=True)
def _matmul_kernel(a, b, out):
    n, m = a.shape
    p = b.shape[1]
    for i in range(n):
        for k in range(m):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed k-loop accumulation order in float32."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a.cols={a.shape[1]} != b.rows={b.shape[0]}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    _matmul_kernel(a, b, out)
    return out


def linear(x, w) -> np.ndarray:
    """``x @ w.T`` for a weight stored as (out_dim, in_dim)."""
    return matmul(x, np.ascontiguousarray(np.asarray(w, dtype=DTYPE).T))


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    m = as_matrix(m, "m")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)


def topk_rows(m, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, descending, ties to lowest index."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"topk_rows expects a 2-D array, got shape {m.shape}")
    if not 1 <= k <= m.shape[1]:
        raise ValueError(f"k={k} out of range for rows of length {m.shape[1]}")
    # stable sort on the negated values keeps equal entries in index order
    return np.argsort(-m, axis=1, kind="stable")[:, :k]


def topk_row(row, k: int) -> list[int]:
    row = np.asarray(row)
    if row.ndim != 1:
        raise ShapeError(f"topk_row expects a vector, got shape {row.shape}")
    return [int(i) for i in topk_rows(row[None, :], k)[0]]


def rmsnorm(x, gain, eps: float = 1e-6) -> np.ndarray:
    """Scale ``x`` by 1/sqrt(mean(x**2) + eps) along the last axis, then by ``gain``.

    Accepts a vector or a (tokens, dim) matrix.
    """
    x = np.asarray(x, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rmsnorm: x has length {x.shape[-1]}, gain has {gain.shape[-1]}")
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=DTYPE)
    denom = np.sqrt(ms + DTYPE(eps))
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(denom > 0, x / denom, DTYPE(0))
    return (y * gain).astype(DTYPE)


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    with np.errstate(over="ignore"):
        return (x / (DTYPE(1) + np.exp(-x))).astype(DTYPE)
