"""MSE grid-search initialization of quantization parameters.

Clipping sites (weights, dynamic activations, KV) search a joint gamma x beta
grid; per-tensor static activation sites search (s, z) directly against the
block output. Layers are calibrated in order, each seeing the activations
produced by the already-quantized layers before it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import (BOS, KV_SITES, LINEARS, QuantHookSet, ToyModel, block_tail, check_prefix,
                    layer_weights, run_block)
from .quant import (S_GUARD, QuantParams, QuantSpec, default_role, group_view, params_from_range,
                    quantize_grouped, ungroup)
from .tensor import F32, F64


class CalibrationError(ValueError):
    pass


def clip_grid(lo: float = 0.5, hi: float = 1.0, step: float = 0.01) -> tuple[float, ...]:
    """Evenly spaced clipping factors from ``lo`` to ``hi`` inclusive."""
    if not (0.0 <= lo <= hi <= 1.0) or step <= 0:
        raise CalibrationError(f"bad clipping grid {lo}..{hi} step {step}")
    n = int(round((hi - lo) / step)) + 1
    return tuple(float(v) for v in np.round(np.linspace(lo, hi, n), 10))


@dataclass(frozen=True)
class CalibConfig:
    n_samples: int = 8
    seq_len: int = 256
    gamma_grid: tuple[float, ...] = field(default_factory=clip_grid)
    beta_grid: tuple[float, ...] = field(default_factory=clip_grid)
    s_points: int = 100
    s_span: float = 50.0

    def __post_init__(self):
        for name in ("gamma_grid", "beta_grid"):
            grid = getattr(self, name)
            if not grid:
                raise CalibrationError(f"{name} is empty")
            if any(not 0.0 <= g <= 1.0 for g in grid):
                raise CalibrationError(f"{name} must lie in [0, 1]")
        if self.s_points < 1 or self.s_span < 1:
            raise CalibrationError("s_points must be >= 1 and s_span >= 1")

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "seq_len": self.seq_len,
                "gamma_grid": list(self.gamma_grid), "beta_grid": list(self.beta_grid),
                "s_points": self.s_points, "s_span": self.s_span}


# --------------------------------------------------------------------------- objectives

def weight_objective(x: np.ndarray, w: np.ndarray):
    """Layer-output MSE of a quantized weight, ``mean((x @ (wq - w))**2)``, via the Gram matrix."""
    x = np.asarray(x, F64).reshape(-1, w.shape[0])
    h = x.T @ x
    w64 = np.asarray(w, F64)
    denom = x.shape[0] * w.shape[1]

    def f(wq):
        e = np.asarray(wq, F64) - w64
        return float(np.sum(e * (h @ e)) / denom)

    return f


def layer_objective(x: np.ndarray, wq: np.ndarray, w: np.ndarray):
    """Layer-output MSE of a quantized input against the full-precision layer."""
    c = w.shape[0]
    ref = np.asarray(x, F64).reshape(-1, c) @ np.asarray(w, F64)
    wq64 = np.asarray(wq, F64)

    def f(xq):
        d = np.asarray(xq, F64).reshape(-1, c) @ wq64 - ref
        return float(np.mean(d * d))

    return f


def tensor_objective(x: np.ndarray):
    x64 = np.asarray(x, F64)

    def f(xq):
        d = np.asarray(xq, F64) - x64
        return float(np.mean(d * d))

    return f


# --------------------------------------------------------------------------- searches

@dataclass
class SearchResult:
    params: QuantParams
    mse: float
    mse_maxmin: float


def grid_search_clipping(x: np.ndarray, spec: QuantSpec, objective, gammas, betas,
                         role: str | None = None) -> SearchResult:
    """Exhaustive gamma x beta search; ties go to larger gamma, then larger beta."""
    gammas = sorted(set(float(g) for g in gammas), reverse=True)
    betas = sorted(set(float(b) for b in betas), reverse=True)
    if not gammas or not betas:
        raise CalibrationError("empty clipping grid")
    role = role or default_role(x, spec)
    grouped = group_view(x, spec, role)
    mx, mn = grouped.max(axis=1), grouped.min(axis=1)

    def evaluate(g, b):
        s, z = params_from_range(mx, mn, spec, g, b)
        xq = ungroup(quantize_grouped(grouped, s, z, spec.qmax), spec, x.shape, role).astype(F32)
        return objective(xq), s, z

    base, _, _ = evaluate(1.0, 1.0)
    best = None
    for g in gammas:
        for b in betas:
            mse, s, z = evaluate(g, b)
            if best is None or mse < best[0]:
                best = (mse, g, b, s, z)
    mse, g, b, s, z = best
    return SearchResult(QuantParams(s, z, g, b, spec.qmax), mse, base)


def static_grid(x: np.ndarray, spec: QuantSpec, s_points: int = 100, s_span: float = 50.0):
    """Candidate (s, z) pairs in search order: s descending, z ascending.

    s runs geometrically from the max-min step down to ``s_mm / s_span``; for
    each s, z covers every integer offset that slides the representable window
    across [min, max], clipped to [0, qmax].
    """
    if spec.granularity != "per_tensor":
        raise CalibrationError("static (s, z) search is defined for per-tensor specs only")
    x64 = np.asarray(x, F64)
    if x64.size == 0:
        raise CalibrationError("empty calibration capture")
    mx, mn = float(x64.max()), float(x64.min())
    s_mm, z_mm = params_from_range(np.array([mx]), np.array([mn]), spec, 1.0, 1.0)
    qmax = spec.qmax
    if mx == mn:
        return [(float(s_mm[0]), float(z)) for z in range(qmax + 1)]
    out = []
    for k in range(s_points):
        s = float(np.float32(float(s_mm[0]) * s_span ** (-k / max(s_points - 1, 1))))
        s = max(s, float(np.float32(S_GUARD)))
        w = s * qmax
        a_lo, a_hi = min(mn, mx - w), max(mn, mx - w)
        z_lo = max(0, int(np.floor(-a_hi / s)))
        z_hi = min(qmax, int(np.ceil(-a_lo / s)))
        zs = set(range(z_lo, z_hi + 1))
        if k == 0:
            zs.add(int(z_mm[0]))
        out.extend((s, float(z)) for z in sorted(zs))
    return out


def grid_search_static(x: np.ndarray, spec: QuantSpec, objective, s_points: int = 100,
                       s_span: float = 50.0) -> SearchResult:
    """Search (s, z) minimizing ``objective(params)``; ties go to larger s, then smaller z."""
    cands = static_grid(x, spec, s_points, s_span)
    x64 = np.asarray(x, F64)
    s_mm, z_mm = params_from_range(np.array([x64.max()]), np.array([x64.min()]), spec, 1.0, 1.0)

    def make(s, z):
        return QuantParams(np.array([s], F32), np.array([z], F32), 1.0, 1.0, spec.qmax)

    base = objective(make(float(s_mm[0]), float(z_mm[0])))
    best = None
    for s, z in cands:
        mse = objective(make(s, z))
        if best is None or mse < best[0]:
            best = (mse, s, z)
    mse, s, z = best
    return SearchResult(make(s, z), mse, base)


# --------------------------------------------------------------------------- model walk

# site -> (captured activation feeding it, linear that consumes it)
_INPUT_OF = {
    "input.q_proj": "attn_in", "input.k_proj": "attn_in", "input.v_proj": "attn_in",
    "input.o_proj": "o_in", "input.gate_proj": "mlp_in", "input.up_proj": "mlp_in",
    "input.down_proj": "down_in", "Q": "Q", "K": "K", "V": "V",
}
# where a static search can resume the block instead of rerunning attention
_RESUME = {"input.o_proj": "o_in", "input.gate_proj": "mlp_in", "input.up_proj": "mlp_in",
           "input.down_proj": "mlp_in"}
ACTIVATION_ORDER = ("input.q_proj", "input.k_proj", "input.v_proj", "Q", "K", "V",
                    "input.o_proj", "input.gate_proj", "input.up_proj", "input.down_proj")


def _inputs(sequences, prefix) -> list[list[int]]:
    lead = [] if prefix is not None else [BOS]
    return [lead + list(s) for s in sequences]


class _LayerRunner:
    """Runs one block over every calibration sequence with a given hook set."""

    def __init__(self, model: ToyModel, i: int, prefix):
        self.model, self.i, self.prefix = model, i, prefix
        self.o = prefix.length if prefix is not None else 0
        self.pkv = (prefix.keys[i], prefix.values[i]) if prefix is not None and self.o else None

    def run(self, hs, hooks: QuantHookSet, weights=None, capture=None):
        weights = weights if weights is not None else layer_weights(self.model, self.i, hooks)
        outs, caps = [], []
        for h in hs:
            acts: dict = {}
            pos = self.o + np.arange(h.shape[0])
            out, _, _ = run_block(self.model, self.i, h, pos, hooks, weights, None, self.pkv,
                                  capture, acts)
            outs.append(out)
            caps.append({name: acts[(self.i, name)] for name in (capture or ())})
        return outs, caps


def _concat(caps, name):
    return np.concatenate([c[name] for c in caps], axis=0)


def _block_mse(outs, refs) -> float:
    num = sum(float(np.sum((o.astype(F64) - r.astype(F64)) ** 2)) for o, r in zip(outs, refs))
    den = sum(r.size for r in refs)
    return num / den


def calibrate_model(model: ToyModel, hooks: QuantHookSet, sequences, prefix=None,
                    cfg: CalibConfig = CalibConfig(), timing: bool = False):
    """Fit every hooked site layer by layer; returns ``(fitted_hooks, report)``."""
    check_prefix(model, prefix)
    sequences = [list(s) for s in sequences]
    if hooks and not sequences:
        raise CalibrationError("calibration needs at least one sequence")
    fitted = QuantHookSet(hooks.specs, {}, hooks.layers)
    report = {"config": cfg.to_dict(), "sites": []}
    if not hooks:
        return fitted, report
    ids = _inputs(sequences, prefix)
    hs = [model.embedding[np.asarray(t)] for t in ids]
    for i in range(model.config.n_layers):
        runner = _LayerRunner(model, i, prefix)
        done: list[str] = []

        def partial(extra=None):
            specs = {s: fitted.specs[s] for s in done + ([extra] if extra else [])}
            return QuantHookSet(specs, fitted.params, frozenset({i}))

        active = [s for s in hooks.specs if hooks.spec(i, s) is not None]
        for name in LINEARS:
            site = f"weight.{name}"
            if site not in active:
                continue
            t0 = time.perf_counter()
            _, caps = runner.run(hs, partial(), capture=[_INPUT_OF[f"input.{name}"]])
            x = _concat(caps, _INPUT_OF[f"input.{name}"])
            w = model.layers[i][name]
            res = grid_search_clipping(w, fitted.specs[site], weight_objective(x, w),
                                       cfg.gamma_grid, cfg.beta_grid, "weight")
            fitted.set(i, site, res.params)
            done.append(site)
            report["sites"].append(_entry(i, site, res, t0, timing))
        refs = None
        for site in ACTIVATION_ORDER:
            if site not in active:
                continue
            spec = fitted.specs[site]
            t0 = time.perf_counter()
            cap = _INPUT_OF[site]
            weights = layer_weights(model, i, partial())
            _, caps = runner.run(hs, partial(), weights, capture=[cap])
            x = _concat(caps, cap)
            if site in KV_SITES:
                if spec.mode == "static" and spec.granularity == "per_tensor":
                    res = grid_search_static(x, spec, tensor_objective(x), cfg.s_points, cfg.s_span)
                else:
                    res = grid_search_clipping(x, spec, tensor_objective(x),
                                               cfg.gamma_grid, cfg.beta_grid, "kv")
                    if spec.mode == "dynamic":
                        res.params = QuantParams(None, None, res.params.gamma, res.params.beta, spec.qmax)
            elif spec.mode == "static":
                if spec.granularity != "per_tensor":
                    raise CalibrationError(f"static activation site {site} must be per-tensor")
                if refs is None:
                    refs, _ = runner.run(hs, QuantHookSet())
                stage = _RESUME.get(site)
                if stage is not None:
                    _, mids = runner.run(hs, partial(), weights, capture=["o_in", "resid_mid"])
                    starts = [(h, m["o_in"]) if stage == "o_in" else (m["resid_mid"], None)
                              for h, m in zip(hs, mids)]

                def objective(p, site=site, stage=stage):
                    fitted.params[(i, site)] = p
                    hooks_now = partial(site)
                    if stage is None:
                        outs, _ = runner.run(hs, hooks_now, weights)
                    else:
                        outs = [block_tail(model, i, h, stage, x, hooks_now, weights) for h, x in starts]
                    return _block_mse(outs, refs)

                res = grid_search_static(x, spec, objective, cfg.s_points, cfg.s_span)
            else:
                lin = site.split(".", 1)[1]
                obj = layer_objective(x, weights[lin], model.layers[i][lin])
                res = grid_search_clipping(x, spec, obj, cfg.gamma_grid, cfg.beta_grid, "activation")
                res.params = QuantParams(None, None, res.params.gamma, res.params.beta, spec.qmax)
            fitted.set(i, site, res.params)
            done.append(site)
            report["sites"].append(_entry(i, site, res, t0, timing))
        hs, _ = runner.run(hs, partial())
    return fitted, report


def _entry(layer: int, site: str, res: SearchResult, t0: float, timing: bool) -> dict:
    p = res.params
    e = {"layer": layer, "site": site, "gamma": p.gamma, "beta": p.beta,
         "mse_maxmin": res.mse_maxmin, "mse": res.mse}
    if p.s is not None and p.s.size == 1:
        e["s"] = float(p.s[0])
        e["z"] = float(p.z[0])
    if timing:
        e["seconds"] = time.perf_counter() - t0
    return e
