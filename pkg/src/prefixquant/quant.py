"""Fake quantization: asymmetric uniform quantizer with clipping factors.

For every quantization group::

    s = (gamma * max(x) - beta * min(x)) / (2**N - 1)
    z = clamp(-floor(beta * min(x) / s), 0, 2**N - 1)
    out = s * (clamp(round(x / s) + z, 0, 2**N - 1) - z)

Rounding is half-to-even. Groups are formed according to the granularity of a
``QuantSpec`` and the role of the tensor being quantized:

* ``weight``      2-D ``[in, out]``; per_channel = one group per output column,
                  group(g) = runs of g input rows within each column.
* ``activation``  ``[..., C]``; per_token = one group per row.
* ``kv``          3-D ``[T, H, D]``; per_head = one group per head across tokens,
                  group(g) = runs of g along head_dim for every (token, head).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import F32, F64, DimensionError

S_GUARD = 1e-8

GRANULARITIES = ("per_tensor", "per_token", "per_channel", "group", "per_head")
MODES = ("dynamic", "static")
ROLES = ("weight", "activation", "kv")

_ALLOWED = {
    "weight": {"per_tensor", "per_channel", "group"},
    "activation": {"per_tensor", "per_token"},
    "kv": {"per_tensor", "per_token", "per_channel", "group", "per_head"},
}


class QuantSpecError(ValueError):
    """A spec that cannot be applied to the given tensor."""


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    granularity: str = "per_token"
    mode: str = "dynamic"
    symmetric: bool = False
    group_size: int = 128

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise QuantSpecError(f"bits must be in 2..16, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise QuantSpecError(f"unknown granularity {self.granularity!r}")
        if self.mode not in MODES:
            raise QuantSpecError(f"unknown mode {self.mode!r}")
        if self.group_size < 1:
            raise QuantSpecError("group_size must be positive")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "granularity": self.granularity,
            "mode": self.mode,
            "symmetric": self.symmetric,
            "group_size": self.group_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(**d)


@dataclass
class QuantParams:
    """Fitted quantizer state.

    ``s``/``z`` hold one entry per group; they are ``None`` for a dynamic site,
    whose only persistent state is the shared clipping pair.
    """

    s: np.ndarray | None = None
    z: np.ndarray | None = None
    gamma: float = 1.0
    beta: float = 1.0
    qmax: int | None = field(default=None, repr=False)

    def validate(self) -> None:
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise QuantSpecError(f"clipping factors out of [0,1]: {self.gamma}, {self.beta}")
        if self.s is not None:
            if not np.all(self.s > 0):
                raise QuantSpecError("step sizes must be positive")
            if self.qmax is not None and not np.all((self.z >= 0) & (self.z <= self.qmax)):
                raise QuantSpecError("zero points out of range")

    def copy(self) -> "QuantParams":
        return QuantParams(
            None if self.s is None else self.s.copy(),
            None if self.z is None else self.z.copy(),
            self.gamma,
            self.beta,
            self.qmax,
        )


def default_role(x: np.ndarray, spec: QuantSpec) -> str:
    if x.ndim == 3:
        return "kv"
    if spec.granularity in ("per_channel", "group"):
        return "weight"
    return "activation"


def _check(x: np.ndarray, spec: QuantSpec, role: str) -> int:
    if role not in ROLES:
        raise QuantSpecError(f"unknown role {role!r}")
    if spec.granularity not in _ALLOWED[role]:
        raise QuantSpecError(f"{spec.granularity} is not valid for {role} tensors")
    if role == "weight" and x.ndim != 2:
        raise QuantSpecError(f"weight tensors must be 2-D, got {x.shape}")
    if role == "kv" and x.ndim != 3:
        raise QuantSpecError(f"kv tensors must be [T, H, D], got {x.shape}")
    if spec.granularity != "group":
        return 0
    axis_len = x.shape[0] if role == "weight" else x.shape[-1]
    g = min(spec.group_size, axis_len)
    if axis_len % g:
        raise QuantSpecError(f"group size {g} does not divide extent {axis_len}")
    return g


def group_view(x: np.ndarray, spec: QuantSpec, role: str | None = None) -> np.ndarray:
    """Rearrange x into ``[n_groups, group_elems]`` (float64 copy)."""
    role = role or default_role(x, spec)
    g = _check(x, spec, role)
    x = np.asarray(x, dtype=F64)
    gran = spec.granularity
    if gran == "per_tensor":
        return x.reshape(1, -1)
    if role == "weight":
        if gran == "per_channel":
            return x.T.copy()
        return x.T.reshape(-1, g)
    if role == "activation":
        return x.reshape(-1, x.shape[-1])
    # kv [T, H, D]
    t, h, d = x.shape
    if gran == "per_token":
        return x.reshape(t, h * d)
    if gran == "per_channel":
        return x.reshape(t, h * d).T.copy()
    if gran == "per_head":
        return x.transpose(1, 0, 2).reshape(h, t * d)
    return x.reshape(-1, g)


def ungroup(y: np.ndarray, spec: QuantSpec, shape: tuple, role: str) -> np.ndarray:
    """Inverse of :func:`group_view`."""
    gran = spec.granularity
    if gran == "per_tensor":
        return y.reshape(shape)
    if role == "weight":
        n_in, n_out = shape
        return y.reshape(n_out, n_in).T
    if role == "activation":
        return y.reshape(shape)
    t, h, d = shape
    if gran == "per_token":
        return y.reshape(shape)
    if gran == "per_channel":
        return y.T.reshape(shape)
    if gran == "per_head":
        return y.reshape(h, t, d).transpose(1, 0, 2)
    return y.reshape(shape)


def n_groups(shape: tuple, spec: QuantSpec, role: str) -> int:
    return group_view(np.zeros(shape, dtype=F32), spec, role).shape[0]


def params_from_range(mx: np.ndarray, mn: np.ndarray, spec: QuantSpec,
                      gamma: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Step sizes and zero points from per-group max/min (float64 in, float32 out)."""
    mx = np.asarray(mx, dtype=F64)
    mn = np.asarray(mn, dtype=F64)
    if spec.symmetric:
        half = 2 ** (spec.bits - 1)
        s = np.maximum(gamma * mx, -beta * mn) / (half - 1 if half > 1 else 1)
        degenerate = (mx == mn) | (s < S_GUARD)
        s = np.where(degenerate, S_GUARD, s).astype(F32)
        z = np.full(s.shape, half, dtype=F32)
        return s, z
    qmax = spec.qmax
    s = (gamma * mx - beta * mn) / qmax
    degenerate = (mx == mn) | (s < S_GUARD)
    s = np.where(degenerate, S_GUARD, s).astype(F32)
    z = -np.floor(beta * mn / s.astype(F64))
    z = np.clip(z, 0, qmax).astype(F32)
    return s, z


def fit_params(x: np.ndarray, spec: QuantSpec, gamma: float = 1.0, beta: float = 1.0,
               role: str | None = None) -> QuantParams:
    if not (0.0 <= gamma <= 1.0 and 0.0 <= beta <= 1.0):
        raise QuantSpecError(f"clipping factors must lie in [0,1], got {gamma}, {beta}")
    grouped = group_view(x, spec, role)
    s, z = params_from_range(grouped.max(axis=1), grouped.min(axis=1), spec, gamma, beta)
    return QuantParams(s, z, float(gamma), float(beta), spec.qmax)


def quantize_grouped(g: np.ndarray, s: np.ndarray, z: np.ndarray, qmax: int) -> np.ndarray:
    """Quantize-dequantize a ``[G, E]`` float64 array with per-group s, z."""
    s64 = np.asarray(s, dtype=F64)[:, None]
    z64 = np.asarray(z, dtype=F64)[:, None]
    q = np.clip(np.rint(g / s64) + z64, 0, qmax)
    return s64 * (q - z64)


def fake_quant(x: np.ndarray, params: QuantParams, spec: QuantSpec,
               role: str | None = None) -> np.ndarray:
    role = role or default_role(x, spec)
    grouped = group_view(x, spec, role)
    if params.s is None or params.s.shape[0] != grouped.shape[0]:
        got = None if params.s is None else params.s.shape
        raise DimensionError(f"params with {got} groups do not fit {grouped.shape[0]} groups of {x.shape}")
    out = quantize_grouped(grouped, params.s, params.z, spec.qmax)
    return ungroup(out, spec, x.shape, role).astype(F32)


def dynamic_quantize_site(x: np.ndarray, spec: QuantSpec, gamma: float = 1.0,
                          beta: float = 1.0, role: str | None = None) -> np.ndarray:
    """Fit parameters on this very input with the site's shared clipping pair, then fake-quantize."""
    if spec.mode != "dynamic":
        raise QuantSpecError("dynamic_quantize_site needs a dynamic spec")
    params = fit_params(x, spec, gamma, beta, role)
    return fake_quant(x, params, spec, role)


def quant_error(ref: np.ndarray, out: np.ndarray) -> float:
    if ref.shape != out.shape:
        raise DimensionError(f"shape mismatch {ref.shape} vs {out.shape}")
    d = ref.astype(F64) - out.astype(F64)
    return float(np.mean(d * d))

