"""Sequential-accumulation matrix kernels with per-operation rounding.

The contract for ``matmul_rounded(A, B)`` at every precision is

    C[i, j] = fold over l = 0..k-1 of  acc <- R(acc + R(A[i, l] * B[l, j]))

with acc starting at +0.0, R the round-to-nearest-even of the array dtype,
and no fused multiply-add.  Accumulation order is fixed left-to-right over
the inner dimension, which makes results bitwise reproducible regardless
of process or thread count (each output element is an independent chain).

float32/float64 go through numba kernels: native arithmetic in the target
dtype *is* the per-op rounding.  float16 keeps a numpy loop over the inner
dimension because numba has no CPU float16; numpy's float16 ufuncs provide
the correctly rounded ops (see ``precision``).  A unit test pins the
absence of FMA contraction in the compiled kernels.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .precision import Precision


@njit(cache=True, nogil=True)
def _matmul_f64(A, B, C):  # pragma: no cover - exercised via matmul_rounded
    n, k = A.shape
    m = B.shape[1]
    for i in range(n):
        for j in range(m):
            C[i, j] = 0.0
        for l in range(k):
            a = A[i, l]
            for j in range(m):
                C[i, j] = C[i, j] + a * B[l, j]


@njit(cache=True, nogil=True)
def _matmul_f32(A, B, C):  # pragma: no cover - exercised via matmul_rounded
    n, k = A.shape
    m = B.shape[1]
    for i in range(n):
        for j in range(m):
            C[i, j] = np.float32(0.0)
        for l in range(k):
            a = A[i, l]
            for j in range(m):
                C[i, j] = C[i, j] + a * B[l, j]


def _matmul_f16(A, B):
    # float16 ufuncs round every multiply and add; loop over the inner
    # dimension keeps the left-to-right order
    n, k = A.shape
    m = B.shape[1]
    acc = np.zeros((n, m), dtype=np.float16)
    prod = np.empty((n, m), dtype=np.float16)
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(k):
            np.multiply(A[:, l : l + 1], B[l, :], out=prod)
            np.add(acc, prod, out=acc)
    return acc


def matmul_rounded(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Rounded (n,k) @ (k,m) in the arrays' common dtype."""
    if A.dtype != B.dtype:
        raise TypeError(f"mixed dtypes {A.dtype} vs {B.dtype}")
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {A.shape} @ {B.shape}")
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B)
    if A.dtype == np.float64:
        C = np.empty((A.shape[0], B.shape[1]), dtype=np.float64)
        _matmul_f64(A, B, C)
        return C
    if A.dtype == np.float32:
        C = np.empty((A.shape[0], B.shape[1]), dtype=np.float32)
        _matmul_f32(A, B, C)
        return C
    if A.dtype == np.float16:
        return _matmul_f16(A, B)
    raise TypeError(f"unsupported dtype {A.dtype}")


def dot_accumulate(p: Precision, a, b) -> float:
    """Rounded dot product of two equal-length vectors at precision ``p``.

    Left-to-right accumulation, each multiply and each add individually
    rounded; no FMA.  This is the scalar instance of ``matmul_rounded``.
    """
    a = np.asarray(a, dtype=p.dtype)
    b = np.asarray(b, dtype=p.dtype)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot_accumulate needs equal-length vectors, got {a.shape} and {b.shape}")
    out = matmul_rounded(a.reshape(1, -1), b.reshape(-1, 1))
    return float(out[0, 0])


def column_sum_rounded(X: np.ndarray) -> np.ndarray:
    """Per-column sequential sum over rows, each add rounded (shape (m,))."""
    ones = np.ones((1, X.shape[0]), dtype=X.dtype)
    # multiplying by 1.0 is exact, so this equals a plain rounded add chain
    return matmul_rounded(ones, X)[0]


def sum_rounded(v: np.ndarray) -> np.ndarray:
    """Sequential rounded sum of a vector; returns a 0-d array in v.dtype."""
    return column_sum_rounded(v.reshape(-1, 1))[0]


def warmup():
    """Force numba compilation of both kernels (used by the CLI)."""
    for dt in (np.float32, np.float64):
        a = np.ones((2, 3), dtype=dt)
        b = np.ones((3, 2), dtype=dt)
        matmul_rounded(a, b)
