"""Dense tensor primitives.

Arrays are plain numpy ndarrays in row-major layout (NCHW for feature maps).
Reductions accumulate in float64 regardless of the input dtype so that
results are reproducible across runs; outputs are cast back to the input
dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, PartitionError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_UNARY = {
    "relu": lambda a: np.maximum(a, 0),
    "tanh": np.tanh,
    "sigmoid": lambda a: 1.0 / (1.0 + np.exp(-a)),
    "sqrt": np.sqrt,
}

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {b.shape} over {a.shape}") from exc


def elementwise(op: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Apply a pointwise operation; binary ops broadcast b over a."""
    a = np.asarray(a)
    if op in _UNARY:
        if b is not None:
            raise ShapeError(f"{op} is unary, got a second operand")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs a second operand")
        b = np.asarray(b)
        _check_broadcast(a, b)
        if op == "div" and np.any(b == 0):
            raise NumericError("division by exact zero")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with a deterministic summation order."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    return a @ b


def grouped_moments(x: np.ndarray, groups_per_instance: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance mean and population variance over contiguous channel groups.

    Group n of instance b covers channels [n*C/N, (n+1)*C/N) and all spatial
    positions; returns arrays of shape (B, N).
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW tensor, got shape {x.shape}")
    n = int(groups_per_instance)
    b, c, h, w = x.shape
    if n < 1 or c % n != 0:
        raise PartitionError(f"{n} groups do not divide C={c}")
    grouped = x.reshape(b, n, (c // n) * h * w).astype(np.float64)
    mean = grouped.mean(axis=2)
    var = np.square(grouped - mean[:, :, None]).mean(axis=2)
    return mean.astype(x.dtype), var.astype(x.dtype)
