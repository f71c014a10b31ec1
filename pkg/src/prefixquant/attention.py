"""Causal multi-head attention with an always-visible prefix of cached keys/values."""

from __future__ import annotations

import math

import numpy as np

from .tensor import F32, F64, DimensionError


def attention_probs(q: np.ndarray, k: np.ndarray, k_prefix: np.ndarray | None = None) -> np.ndarray:
    """Softmax attention weights ``[H, T, o + S]`` (float64).

    ``q`` is ``[T, H, D]`` and ``k`` is ``[S, H, D]`` with ``S >= T``: the queries
    are the last T of the S key positions. Prefix keys ``[o, H, D]`` come first
    and are visible from every query.
    """
    if q.ndim != 3 or k.ndim != 3 or q.shape[1:] != k.shape[1:]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}")
    t, h, d = q.shape
    s = k.shape[0]
    if s < t:
        raise DimensionError(f"fewer keys ({s}) than queries ({t})")
    if k_prefix is not None and k_prefix.shape[0]:
        if k_prefix.shape[1:] != k.shape[1:]:
            raise DimensionError(f"prefix keys {k_prefix.shape} do not match {k.shape}")
        k = np.concatenate([k_prefix, k], axis=0)
    o = k.shape[0] - s
    scores = np.einsum("thd,shd->hts", q.astype(F64), k.astype(F64)) / math.sqrt(d)
    # query i (0-based among T) sits at key index o + (s - t) + i
    qpos = o + (s - t) + np.arange(t)
    kpos = np.arange(o + s)
    visible = (kpos[None, :] <= qpos[:, None]) | (kpos[None, :] < o)
    scores = np.where(visible[None, :, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def attention_with_prefix(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                          k_prefix: np.ndarray | None = None,
                          v_prefix: np.ndarray | None = None, dtype=F32) -> np.ndarray:
    """``Softmax(Q [K k']^T / sqrt(d)) [V; v']`` per head with causal masking among K/V.

    Returns ``[T, H, D]``.
    """
    if v.shape != k.shape:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ")
    has_prefix = k_prefix is not None and k_prefix.shape[0] > 0
    if has_prefix and (v_prefix is None or v_prefix.shape != k_prefix.shape):
        raise DimensionError("prefix keys and values must have equal shapes")
    p = attention_probs(q, k, k_prefix if has_prefix else None)
    vals = np.concatenate([v_prefix, v], axis=0) if has_prefix else v
    out = np.einsum("hts,shd->thd", p, vals.astype(F64))
    return out.astype(dtype)
