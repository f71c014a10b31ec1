"""Walsh-Hadamard rotations and their fusion into model weights.

A rotation of width n is ``Q = diag(d) H_n / sqrt(n)`` with a random sign vector
d, so ``x @ Q == wht(x * d)`` and ``y @ Q.T == wht(y) * d``. Sites:

* R1  residual stream; fused into embedding, every reader and writer of the stream.
* R2  per-head on the value/o_proj path; fused into v_proj columns and o_proj rows.
* R3  per-head on post-RoPE queries and keys; applied online to both.
* R4  on the down_proj input; applied online with the inverse fused into down_proj.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import F32, F64, DimensionError

SITES = ("R1", "R2", "R3", "R4")


class RotationError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def wht(x: np.ndarray, dtype=F32) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform along the last axis."""
    n = x.shape[-1]
    if not _is_pow2(n):
        raise DimensionError(f"Walsh-Hadamard transform needs a power-of-two extent, got {n}")
    lead = x.shape[:-1]
    y = x.astype(F64).reshape(-1, n)
    h = 1
    while h < n:
        y = y.reshape(-1, n // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack([a + b, a - b], axis=2)
        h *= 2
    y = y.reshape(*lead, n) / math.sqrt(n)
    return y.astype(dtype)


def hadamard_matrix(n: int) -> np.ndarray:
    """Sylvester Hadamard matrix with +-1 entries (unnormalised)."""
    if not _is_pow2(n):
        raise DimensionError(f"n must be a power of two, got {n}")
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


@dataclass(frozen=True)
class HadamardSpec:
    dim: int
    sign_diag: np.ndarray
    site: str

    def __post_init__(self):
        if not _is_pow2(self.dim):
            raise RotationError(f"rotation dim must be a power of two, got {self.dim}")
        if self.site not in SITES:
            raise RotationError(f"unknown rotation site {self.site!r}")
        if self.sign_diag.shape != (self.dim,) or not np.all(np.abs(self.sign_diag) == 1):
            raise RotationError("sign_diag must be a +-1 vector of length dim")

    def matrix(self) -> np.ndarray:
        return self.sign_diag[:, None] * hadamard_matrix(self.dim) / math.sqrt(self.dim)

    def apply(self, x: np.ndarray, dtype=F32) -> np.ndarray:
        """x @ Q along the last axis."""
        return wht(x.astype(F64) * self.sign_diag, dtype)

    def apply_t(self, x: np.ndarray, dtype=F32) -> np.ndarray:
        """x @ Q.T along the last axis."""
        return (wht(x, F64) * self.sign_diag).astype(dtype)


def random_hadamard(dim: int, site: str, rng: np.random.Generator) -> HadamardSpec:
    signs = np.where(rng.integers(0, 2, size=dim) == 1, 1.0, -1.0)
    return HadamardSpec(dim, signs, site)


def plain_hadamard(dim: int, site: str) -> HadamardSpec:
    return HadamardSpec(dim, np.ones(dim), site)


def online_rotate(x: np.ndarray, spec: HadamardSpec, dtype=F32) -> np.ndarray:
    if spec.site not in ("R3", "R4"):
        raise RotationError(f"online rotation is only defined for R3/R4, not {spec.site}")
    if x.shape[-1] != spec.dim:
        raise DimensionError(f"{spec.site} of width {spec.dim} cannot rotate extent {x.shape[-1]}")
    return spec.apply(x, dtype)


def _left(q: HadamardSpec, w: np.ndarray) -> np.ndarray:
    """Q.T @ w (rotate the input rows of an [in, out] weight)."""
    return q.apply(w.T.astype(F64), F64).T


def _right(w: np.ndarray, q: HadamardSpec) -> np.ndarray:
    """w @ Q (rotate the output columns)."""
    return q.apply(w.astype(F64), F64)


def _per_head_right(w: np.ndarray, q: HadamardSpec, n_heads: int) -> np.ndarray:
    rows = w.shape[0]
    return q.apply(w.astype(F64).reshape(rows, n_heads, q.dim), F64).reshape(rows, -1)


def _per_head_left(q: HadamardSpec, w: np.ndarray, n_heads: int) -> np.ndarray:
    cols = w.shape[1]
    wt = w.T.astype(F64).reshape(cols, n_heads, q.dim)
    return q.apply(wt, F64).reshape(cols, -1).T


def fold_norms(model):
    """Move RMSNorm gains into the following linear layers (gains become 1)."""
    m = model.copy()
    for layer in m.layers:
        g = layer["input_norm"].astype(F64)[:, None]
        for name in ("q_proj", "k_proj", "v_proj"):
            layer[name] = (g * layer[name]).astype(F32)
        layer["input_norm"] = np.ones_like(layer["input_norm"])
        g = layer["post_norm"].astype(F64)[:, None]
        for name in ("gate_proj", "up_proj"):
            layer[name] = (g * layer[name]).astype(F32)
        layer["post_norm"] = np.ones_like(layer["post_norm"])
    m.lm_head = (m.final_norm.astype(F64)[:, None] * m.lm_head).astype(F32)
    m.final_norm = np.ones_like(m.final_norm)
    return m


def absorb_rotations(model, r1: HadamardSpec | None, r2: HadamardSpec | None):
    """Return a new model with R1/R2 fused into the weights; the float function is unchanged."""
    cfg = model.config
    if r1 is not None and (r1.dim != cfg.hidden or r1.site != "R1"):
        raise RotationError(f"R1 must be an R1 spec of width hidden={cfg.hidden}")
    if r2 is not None and (r2.dim != cfg.head_dim or r2.site != "R2"):
        raise RotationError(f"R2 must be an R2 spec of width head_dim={cfg.head_dim}")
    m = fold_norms(model)
    if r1 is not None:
        m.embedding = _right(m.embedding, r1).astype(F32)
        m.lm_head = _left(r1, m.lm_head).astype(F32)
    for layer in m.layers:
        if r1 is not None:
            for name in ("q_proj", "k_proj", "v_proj", "gate_proj", "up_proj"):
                layer[name] = _left(r1, layer[name]).astype(F32)
            for name in ("o_proj", "down_proj"):
                layer[name] = _right(layer[name], r1).astype(F32)
        if r2 is not None:
            layer["v_proj"] = _per_head_right(layer["v_proj"], r2, cfg.n_heads).astype(F32)
            layer["o_proj"] = _per_head_left(r2, layer["o_proj"], cfg.n_heads).astype(F32)
    m._fp = None
    return m


def enable_online_rotations(model, r3: HadamardSpec | None, r4: HadamardSpec | None,
                            seed: int = 0, absorbed: tuple[str, ...] = ()):
    """Activate R3/R4 in forward(); R4's inverse is fused into down_proj."""
    from .model import RotationInfo

    cfg = model.config
    if r3 is not None and (r3.dim != cfg.head_dim or r3.site != "R3"):
        raise RotationError(f"R3 must be an R3 spec of width head_dim={cfg.head_dim}")
    if r4 is not None and (r4.dim != cfg.intermediate or r4.site != "R4"):
        raise RotationError(f"R4 must be an R4 spec of width intermediate={cfg.intermediate}")
    if model.rotation is not None and (model.rotation.r3 or model.rotation.r4):
        raise RotationError("online rotations are already active")
    m = model.copy()
    if r4 is not None:
        for layer in m.layers:
            layer["down_proj"] = _left(r4, layer["down_proj"]).astype(F32)
    sites = tuple(absorbed) + tuple(s for s, r in (("R3", r3), ("R4", r4)) if r is not None)
    m.rotation = RotationInfo(seed, sites, r3, r4)
    m._fp = None
    return m


def rotate_model(model, seed: int, sites=SITES):
    """Apply the requested subset of R1-R4 with signs drawn from ``seed``."""
    from .tensor import make_rng

    unknown = set(sites) - set(SITES)
    if unknown:
        raise RotationError(f"unknown rotation sites {sorted(unknown)}")
    sites = tuple(s for s in SITES if s in set(sites))
    cfg = model.config
    rng = make_rng(seed)
    specs = {
        "R1": random_hadamard(cfg.hidden, "R1", rng),
        "R2": random_hadamard(cfg.head_dim, "R2", rng),
        "R3": random_hadamard(cfg.head_dim, "R3", rng),
        "R4": random_hadamard(cfg.intermediate, "R4", rng),
    }
    pick = {s: (specs[s] if s in sites else None) for s in SITES}
    m = absorb_rotations(model, pick["R1"], pick["R2"])
    absorbed = tuple(s for s in ("R1", "R2") if s in sites)
    return enable_online_rotations(m, pick["R3"], pick["R4"], seed, absorbed)


def channel_spread(x: np.ndarray) -> float:
    """max over channels of the channel-wise max |x|, divided by the lower-median channel."""
    from .tensor import median

    cmax = np.abs(x.astype(F64)).reshape(-1, x.shape[-1]).max(axis=0)
    return float(cmax.max() / max(median(cmax), 1e-12))
