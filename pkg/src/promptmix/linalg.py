"""Dense double-precision building blocks for the transformer stack.

Matrices are plain float64 ``numpy`` arrays in row-major layout. Everything
here is a pure function over immutable inputs with a fixed reduction order,
so repeated calls on the same data are bit-identical.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError, InputError

Matrix = np.ndarray
Vector = np.ndarray

ALLOWED = True
BLOCKED = False


def as_matrix(data) -> Matrix:
    """Coerce to a float64 2-D array (copying only when needed)."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit inner-dimension check."""
    if a.shape[1] != b.shape[0]:
        raise ConfigError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def softmax_columns(m: Matrix, mask: np.ndarray | None) -> Matrix:
    """Softmax across the columns of each row, with masking.

    ``mask[i, j]`` says whether row (query) ``i`` may attend to column ``j``.
    Masking is additive: blocked logits are treated as -inf before the
    exponential, so each row normalizes to 1 over its allowed entries and
    blocked entries come out exactly zero.
    """
    if m.shape[0] != m.shape[1]:
        raise ConfigError(f"attention matrix must be square, got {m.shape}")
    if mask is not None:
        if mask.shape != m.shape:
            raise ConfigError(f"mask shape {mask.shape} != logits shape {m.shape}")
        if not mask.any(axis=1).all():
            raise InputError("attention row with zero allowed entries cannot be normalized")
        logits = np.where(mask, m, -np.inf)
    else:
        logits = m
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.where(np.isneginf(shifted), 0.0, np.exp(shifted))
    out = expd / expd.sum(axis=1, keepdims=True)
    return out


def softmax_vector(v: Vector) -> Vector:
    """Numerically stable softmax of a 1-D array."""
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def relu(m: Matrix) -> Matrix:
    return np.maximum(m, 0.0)


def concat_columns(a: Matrix, b: Matrix) -> Matrix:
    """Column-wise concatenation; ``a`` occupies the leading columns."""
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"row mismatch in column concat: {a.shape[0]} vs {b.shape[0]}")
    return np.concatenate([a, b], axis=1)


def mean_columns(m: Matrix) -> Vector:
    """Arithmetic mean over columns (fixed left-to-right summation)."""
    if m.shape[1] < 1:
        raise ConfigError("mean over zero columns is undefined")
    return m.sum(axis=1) / m.shape[1]


def finite_difference_gradient(
    f: Callable[[Matrix], float], params: Matrix, epsilon: float = 1e-5
) -> Matrix:
    """Central-difference gradient of a scalar function, entry by entry.

    This is the independent oracle every analytic gradient in the package is
    checked against; it never shares code with the backward passes.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    work = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(work)
    it = np.nditer(work, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = work[idx]
        work[idx] = orig + epsilon
        f_plus = float(f(work))
        work[idx] = orig - epsilon
        f_minus = float(f(work))
        work[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise InputError(f"objective returned non-finite value at entry {idx}")
        grad[idx] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad


def assert_finite(m: np.ndarray, what: str = "array") -> None:
    if not np.isfinite(m).all():
        raise InputError(f"{what} contains NaN or Inf")


def frozen(m: np.ndarray) -> np.ndarray:
    """Return ``m`` with its write flag cleared (views share the flag)."""
    m.setflags(write=False)
    return m
