"""Emulated IEEE-754 arithmetic at binary16/32/64 with per-operation rounding.

Every value in this library lives in one of three precisions and is stored
in the matching numpy dtype, so "stored" always implies "representable".
Two facts make the emulation cheap and exact:

- numpy's float16/float32 ufuncs for +, -, *, / are correctly rounded
  (round-to-nearest, ties-to-even).  For float16 numpy computes in float32
  and converts back; since float32 carries 24 = 2*11 + 2 significand bits,
  that double rounding is innocuous for these operations.
- For exp/log (and the sqrt used by batch normalization) no correctly
  rounded low-precision routine is assumed: we evaluate in binary64 and
  round once to the target.  The same rule defines rounded division and
  multiplication, and agrees with the native ufuncs (tested).

Accumulations (dot products, matrix products, column sums) round after
every multiply and every add, left to right, never fusing multiply-add.
Those live in ``kernels``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Precision(enum.Enum):
    """IEEE-754 binary interchange format selector."""

    B16 = "b16"
    B32 = "b32"
    B64 = "b64"

    @property
    def dtype(self) -> np.dtype:
        return _DTYPES[self]

    @property
    def bits(self) -> int:
        return {Precision.B16: 16, Precision.B32: 32, Precision.B64: 64}[self]

    @property
    def significand_bits(self) -> int:
        # stored mantissa bits (excluding the implicit leading 1)
        return {Precision.B16: 10, Precision.B32: 23, Precision.B64: 52}[self]

    @property
    def max_finite(self) -> float:
        return float(np.finfo(self.dtype).max)

    @property
    def smallest_subnormal(self) -> float:
        return float(np.finfo(self.dtype).smallest_subnormal)

    @classmethod
    def from_tag(cls, tag: str) -> "Precision":
        try:
            return cls(tag.lower())
        except ValueError:
            raise ValueError(f"unknown precision tag {tag!r}; expected one of b16/b32/b64")


_DTYPES = {
    Precision.B16: np.dtype(np.float16),
    Precision.B32: np.dtype(np.float32),
    Precision.B64: np.dtype(np.float64),
}


def round_to(p: Precision, x: float) -> float:
    """Round a real scalar to the nearest value representable in ``p``.

    Round-to-nearest, ties-to-even; values below half the smallest
    subnormal go to signed zero, overflow goes to signed infinity.
    NaN propagates.  Total on floats.
    """
    with np.errstate(over="ignore"):
        return float(np.float64(x).astype(p.dtype))


def round_array(p: Precision, x: np.ndarray) -> np.ndarray:
    """Vector form of :func:`round_to`; returns an array in ``p.dtype``."""
    with np.errstate(over="ignore"):
        return np.asarray(x).astype(p.dtype)


def is_representable(p: Precision, x: np.ndarray) -> bool:
    x = np.asarray(x, dtype=np.float64)
    r = round_array(p, x).astype(np.float64)
    return bool(np.array_equal(r, x, equal_nan=True))


@dataclass(frozen=True)
class RoundedTensor:
    """An n-d array whose every entry is exactly representable in ``precision``.

    ``data`` is stored in the precision's native dtype, which makes the
    representability invariant structural.  Use :meth:`from_float64` to
    quantize arbitrary doubles, or the constructor to wrap already-rounded
    data (validated).
    """

    data: np.ndarray
    precision: Precision

    def __post_init__(self):
        if self.data.dtype != self.precision.dtype:
            raise TypeError(
                f"dtype {self.data.dtype} does not match precision {self.precision.value}"
            )

    @classmethod
    def from_float64(cls, x: np.ndarray, precision: Precision) -> "RoundedTensor":
        return cls(round_array(precision, np.asarray(x, dtype=np.float64)), precision)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def exact_zero_count(self) -> int:
        # +0.0 and -0.0 both count as exact zeros
        return int(np.count_nonzero(self.data == 0))


class DomainError(ValueError):
    """Elementary log-exp evaluation outside its domain (e.g. log of x <= 0)."""


def rounded_add(p: Precision, a, b):
    return _rounded_binop(p, a, b, np.add)


def rounded_sub(p: Precision, a, b):
    return _rounded_binop(p, a, b, np.subtract)


def rounded_mul(p: Precision, a, b):
    return _rounded_binop(p, a, b, np.multiply)


def rounded_div(p: Precision, a, b):
    return _rounded_binop(p, a, b, np.divide)


def _rounded_binop(p, a, b, op):
    # operands must already be representable; compute exactly (binary64) and
    # round once, which equals the correctly rounded target-precision op
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        out = round_array(p, op(a64, b64))
    return out if out.ndim else out[()]


def rounded_exp(p: Precision, x):
    """exp evaluated in binary64, rounded once to ``p``."""
    x64 = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", under="ignore"):
        out = round_array(p, np.exp(x64))
    return out if out.ndim else out[()]


def rounded_log(p: Precision, x):
    """log evaluated in binary64, rounded once to ``p``; domain error on x <= 0."""
    x64 = np.asarray(x, dtype=np.float64)
    if np.any(x64 <= 0):
        raise DomainError("log requires strictly positive input")
    out = round_array(p, np.log(x64))
    return out if out.ndim else out[()]


def rounded_sqrt(p: Precision, x):
    """sqrt evaluated in binary64, rounded once to ``p`` (used by batch norm)."""
    x64 = np.asarray(x, dtype=np.float64)
    if np.any(x64 < 0):
        raise DomainError("sqrt requires nonnegative input")
    out = round_array(p, np.sqrt(x64))
    return out if out.ndim else out[()]
