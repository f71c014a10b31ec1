"""Dense float32 tensors and the numeric primitives the rest of the package uses.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Reductions and
products accumulate in float64 and are rounded to the requested storage dtype
(float32 unless a caller asks otherwise, e.g. the gradient tape).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

F32 = np.float32
F64 = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


class NonFiniteError(ValueError):
    """Raised when external data contains NaN or Inf."""


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float32 tensor from external data, rejecting non-finite values."""
    arr = np.asarray(data, dtype=F32)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise DimensionError(f"extents must be positive, got {shape}")
        if math.prod(shape) != arr.size:
            raise DimensionError(f"shape {shape} does not match {arr.size} values")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return np.ascontiguousarray(arr)


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are specified bit-for-bit, so equal seeds agree across platforms.
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: np.ndarray, b: np.ndarray, dtype=F32) -> np.ndarray:
    """Matrix product over the last two axes, accumulated in float64."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return (a.astype(F64) @ b.astype(F64)).astype(dtype)


def softmax_rows(x: np.ndarray, dtype=F32) -> np.ndarray:
    x64 = x.astype(F64)
    x64 = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(x64)
    return (e / e.sum(axis=-1, keepdims=True)).astype(dtype)


def rmsnorm(x: np.ndarray, g: np.ndarray, eps: float, dtype=F32) -> np.ndarray:
    if x.shape[-1] != g.shape[-1]:
        raise DimensionError(f"norm gain {g.shape} does not match input {x.shape}")
    x64 = x.astype(F64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * inv * g.astype(F64)).astype(dtype)


def silu(x: np.ndarray, dtype=F32) -> np.ndarray:
    x64 = x.astype(F64)
    # exp(-x) overflows for very negative x; the limit is 0 there anyway.
    with np.errstate(over="ignore"):
        out = x64 / (1.0 + np.exp(-x64))
    return out.astype(dtype)


def add(a: np.ndarray, b: np.ndarray, dtype=F32) -> np.ndarray:
    if a.shape != b.shape and b.shape != a.shape[-1:]:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    return (a.astype(F64) + b.astype(F64)).astype(dtype)


def mul(a: np.ndarray, b: np.ndarray, dtype=F32) -> np.ndarray:
    if a.shape != b.shape and b.shape != a.shape[-1:]:
        raise DimensionError(f"cannot multiply {a.shape} and {b.shape} elementwise")
    return (a.astype(F64) * b.astype(F64)).astype(dtype)


def argmax(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=-1)


def median(v: np.ndarray) -> float:
    """Lower median: for even length, the smaller of the two middle order statistics."""
    v = np.asarray(v).ravel()
    if v.size == 0:
        raise DimensionError("median of empty vector")
    return float(np.sort(v, kind="stable")[(v.size - 1) // 2])


def rope_tables(positions: np.ndarray, head_dim: int, theta: float):
    """cos/sin tables of shape [T, head_dim] for rotate-half rotary embedding."""
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=F64) * 2.0 / head_dim)
    ang = positions.astype(F64)[:, None] * inv_freq[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang), np.sin(ang)


def rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def rope_apply(x: np.ndarray, positions: np.ndarray, theta: float, dtype=F32) -> np.ndarray:
    """Rotary embedding on x of shape [T, H, D] at the given absolute positions."""
    if x.ndim != 3 or x.shape[0] != len(positions):
        raise DimensionError(f"rope expects [T, H, D] with T={len(positions)}, got {x.shape}")
    cos, sin = rope_tables(np.asarray(positions), x.shape[-1], theta)
    x64 = x.astype(F64)
    out = x64 * cos[:, None, :] + rotate_half(x64) * sin[:, None, :]
    return out.astype(dtype)


def rope_inverse(x: np.ndarray, positions: np.ndarray, theta: float, dtype=F32) -> np.ndarray:
    cos, sin = rope_tables(np.asarray(positions), x.shape[-1], theta)
    x64 = x.astype(F64)
    out = x64 * cos[:, None, :] - rotate_half(x64) * sin[:, None, :]
    return out.astype(dtype)


def transpose(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.T)


def reshape(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)
