"""Block-wise fine-tuning of weights and quantization parameters against a full-precision teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .model import (BOS, LINEARS, QuantHookSet, ToyModel, check_prefix, layer_weights,
                    run_block)
from .quant import S_GUARD, QuantParams, fit_params
from .tensor import F32, F64, make_rng

TRAINABLE_KINDS = ("weights", "weight_qparams", "act_clip", "act_qparams")


class TrainingError(ValueError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_qparams: float = 5e-5
    lr_weights: float = 5e-6
    batch: int = 4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_samples: int = 64
    seq_len: int = 256
    seed: int = 0
    trainables: tuple[str, ...] = TRAINABLE_KINDS
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.lr_qparams < 0 or self.lr_weights < 0:
            raise TrainingError("learning rates must be non-negative")
        if self.epochs < 0 or self.batch < 1:
            raise TrainingError("epochs must be >= 0 and batch >= 1")
        bad = set(self.trainables) - set(TRAINABLE_KINDS)
        if bad:
            raise TrainingError(f"unknown trainables {sorted(bad)}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["trainables"] = list(self.trainables)
        return d


def default_epochs(act_bits: int | None) -> int:
    return 10 if act_bits is not None and act_bits >= 8 else 20


# --------------------------------------------------------------------------- trainable state

class BlockState:
    """Trainable arrays for one block: name -> float64 array, plus their learning-rate group."""

    def __init__(self, model: ToyModel, i: int, hooks: QuantHookSet, trainables=TRAINABLE_KINDS):
        self.i = i
        self.arrays: dict[str, np.ndarray] = {}
        self.group: dict[str, str] = {}
        self.train: set[str] = set()
        layer = model.layers[i]
        for name in LINEARS:
            self._add(f"w:{name}", layer[name], "w", "weights" in trainables)
            site = f"weight.{name}"
            spec = hooks.spec(i, site)
            if spec is not None:
                p = hooks.get(i, site)
                if p is None or p.s is None:
                    p = fit_params(layer[name], spec, 1.0, 1.0, "weight")
                on = "weight_qparams" in trainables
                self._add(f"s:{site}", p.s, "q", on)
                self._add(f"z:{site}", p.z, "q", on)
        for site in hooks.specs:
            if site.startswith("weight.") or hooks.spec(i, site) is None:
                continue
            spec = hooks.spec(i, site)
            p = hooks.get(i, site) or QuantParams()
            if spec.mode == "dynamic":
                on = "act_clip" in trainables
                self._add(f"g:{site}", np.asarray(p.gamma), "q", on)
                self._add(f"b:{site}", np.asarray(p.beta), "q", on)
            else:
                if p.s is None:
                    raise TrainingError(f"static site {site} in layer {i} is not calibrated")
                on = "act_qparams" in trainables
                self._add(f"s:{site}", p.s, "q", on)
                self._add(f"z:{site}", p.z, "q", on)

    def _add(self, key, value, group, train):
        self.arrays[key] = np.array(value, dtype=F64)
        self.group[key] = group
        if train:
            self.train.add(key)

    def project(self, qmax_of) -> None:
        for key, arr in self.arrays.items():
            kind = key[0]
            if kind in "gb":
                np.clip(arr, 0.0, 1.0, out=arr)
            elif kind == "s":
                np.maximum(arr, S_GUARD, out=arr)
            elif kind == "z":
                np.clip(arr, 0.0, qmax_of(key[2:]), out=arr)

    def write_back(self, model: ToyModel, hooks: QuantHookSet) -> None:
        """Store trained values into ``model`` and ``hooks`` (in place)."""
        i = self.i
        for name in LINEARS:
            model.layers[i][name] = self.arrays[f"w:{name}"].astype(F32)
        for site in hooks.specs:
            spec = hooks.spec(i, site)
            if spec is None:
                continue
            old = hooks.get(i, site) or QuantParams(qmax=spec.qmax)
            if f"s:{site}" in self.arrays:
                s = np.maximum(self.arrays[f"s:{site}"], S_GUARD).astype(F32)
                z = np.clip(np.rint(self.arrays[f"z:{site}"]), 0, spec.qmax).astype(F32)
                hooks.set(i, site, QuantParams(s, z, old.gamma, old.beta, spec.qmax))
            elif f"g:{site}" in self.arrays:
                g = float(np.clip(self.arrays[f"g:{site}"], 0, 1))
                b = float(np.clip(self.arrays[f"b:{site}"], 0, 1))
                hooks.set(i, site, QuantParams(None, None, g, b, spec.qmax))


# --------------------------------------------------------------------------- tape forward

def block_forward_quant(tape: Tape, model: ToyModel, i: int, h: np.ndarray, positions: np.ndarray,
                        hooks: QuantHookSet, state: BlockState, prefix_kv=None):
    """Block forward on the tape. Returns ``(out_var, leaves)`` with one leaf per state array."""
    cfg = model.config
    layer = model.layers[i]
    rot = model.rotation
    leaves = {k: tape.leaf(v if tape.dtype == F64 else v.astype(F32) if k[0] == "w" else v,
                           name=k, requires_grad=k in state.train)
              for k, v in state.arrays.items()}

    def act(site, x: Var, role="activation") -> Var:
        spec = hooks.spec(i, site)
        if spec is None:
            return x
        if spec.mode == "dynamic":
            return tape.dynamic_quant(x, leaves[f"g:{site}"], leaves[f"b:{site}"], spec, role)
        return tape.fake_quant(x, leaves[f"s:{site}"], leaves[f"z:{site}"], spec, role)

    def weight(name) -> Var:
        w = leaves[f"w:{name}"]
        site = f"weight.{name}"
        spec = hooks.spec(i, site)
        if spec is None:
            return w
        return tape.fake_quant(w, leaves[f"s:{site}"], leaves[f"z:{site}"], spec, "weight")

    hv = tape.leaf(h.astype(tape.dtype), name="h")
    w = {name: weight(name) for name in LINEARS}
    x = tape.rmsnorm(hv, layer["input_norm"], cfg.norm_eps)
    shape = (h.shape[0], cfg.n_heads, cfg.head_dim)
    q = tape.matmul(act("input.q_proj", x), w["q_proj"])
    k = tape.matmul(act("input.k_proj", x), w["k_proj"])
    v = tape.matmul(act("input.v_proj", x), w["v_proj"])
    q = tape.rope(tape.reshape(q, shape), positions, cfg.rope_theta)
    k = tape.rope(tape.reshape(k, shape), positions, cfg.rope_theta)
    v = tape.reshape(v, shape)
    if rot is not None and rot.r3 is not None:
        q = tape.hadamard(q, rot.r3)
        k = tape.hadamard(k, rot.r3)
    q = act("Q", q, "kv")
    k = act("K", k, "kv")
    v = act("V", v, "kv")
    kp, vp = prefix_kv if prefix_kv is not None else (None, None)
    a = tape.reshape(tape.attention(q, k, v, kp, vp), (h.shape[0], cfg.hidden))
    hv = tape.add(hv, tape.matmul(act("input.o_proj", a), w["o_proj"]))
    x = tape.rmsnorm(hv, layer["post_norm"], cfg.norm_eps)
    gate = tape.matmul(act("input.gate_proj", x), w["gate_proj"])
    up = tape.matmul(act("input.up_proj", x), w["up_proj"])
    m = tape.mul(tape.silu(gate), up)
    if rot is not None and rot.r4 is not None:
        m = tape.hadamard(m, rot.r4)
    hv = tape.add(hv, tape.matmul(act("input.down_proj", m), w["down_proj"]))
    return hv, leaves


# --------------------------------------------------------------------------- training

class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr_of) -> None:
        c = self.cfg
        self.t += 1
        for key in sorted(grads):
            g = grads[key]
            m = self.m.get(key, np.zeros_like(g))
            v = self.v.get(key, np.zeros_like(g))
            m = c.beta1 * m + (1 - c.beta1) * g
            v = c.beta2 * v + (1 - c.beta2) * g * g
            self.m[key], self.v[key] = m, v
            mhat = m / (1 - c.beta1**self.t)
            vhat = v / (1 - c.beta2**self.t)
            arrays[key] -= lr_of(key) * mhat / (np.sqrt(vhat) + c.eps)


def _eval_loss(model, i, inputs, targets, positions, hooks, pkv) -> float:
    weights = layer_weights(model, i, hooks)
    tot, n = 0.0, 0
    for h, t in zip(inputs, targets):
        out, _, _ = run_block(model, i, h, positions, hooks, weights, None, pkv)
        d = out.astype(F64) - t.astype(F64)
        tot += float(np.sum(d * d))
        n += d.size
    return tot / n


@dataclass
class BlockResult:
    losses: list[float]
    best_epoch: int


def train_block(model: ToyModel, i: int, inputs, targets, hooks: QuantHookSet,
                cfg: TrainConfig = TrainConfig(), prefix_kv=None, offset: int = 0) -> BlockResult:
    """Train block ``i`` in place (model weights and hooks) to match ``targets``.

    ``losses[0]`` is the initial training-set MSE and ``losses[e]`` the MSE after
    epoch e, measured with the inference forward. The parameters of the best
    epoch are kept, so the returned block never ends worse than it started.
    """
    inputs = [np.asarray(x, F32) for x in inputs]
    targets = [np.asarray(t, F32) for t in targets]
    if len(inputs) != len(targets) or not inputs:
        raise TrainingError("need matching, non-empty input and target lists")
    state = BlockState(model, i, hooks, cfg.trainables)
    local = hooks.only_layers({i}) if hooks.layers is None else hooks
    positions = [offset + np.arange(x.shape[0]) for x in inputs]
    pos = positions[0]
    if any(len(p) != len(pos) for p in positions):
        raise TrainingError("training sequences must have equal length")
    initial = _eval_loss(model, i, inputs, targets, pos, local, prefix_kv)
    losses = [initial]
    best = (initial, 0, {k: v.copy() for k, v in state.arrays.items()})
    if cfg.epochs == 0 or not state.train or initial == 0.0:
        return BlockResult(losses, 0)
    qmax = {s: local.specs[s].qmax for s in local.specs}
    lr = {"w": cfg.lr_weights, "q": cfg.lr_qparams}
    opt = Adam(cfg)
    rng = make_rng(cfg.seed + 7919 * i)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            grads: dict[str, np.ndarray] = {}
            for j in idx:
                tape = Tape(F64)
                out, leaves = block_forward_quant(tape, model, i, inputs[j], pos, local, state, prefix_kv)
                loss = tape.mse(out, targets[j])
                tape.backward(loss)
                for key in state.train:
                    g = leaves[key].grad
                    if g is not None:
                        grads[key] = grads.get(key, 0.0) + g / len(idx)
            opt.step(state.arrays, grads, lambda k: lr[state.group[k]])
            state.project(lambda site: qmax[site])
        state.write_back(model, local)
        cur = _eval_loss(model, i, inputs, targets, pos, local, prefix_kv)
        losses.append(cur)
        if not np.isfinite(cur) or cur > cfg.divergence_factor * initial:
            raise DivergenceError(
                f"block {i} diverged at epoch {epoch}: loss {cur:.6g} > {cfg.divergence_factor} x initial {initial:.6g}")
        if cur < best[0]:
            best = (cur, epoch, {k: v.copy() for k, v in state.arrays.items()})
    state.arrays = best[2]
    state.write_back(model, local)
    model._fp = None
    for site in local.specs:
        if (i, site) in local.params:
            hooks.params[(i, site)] = local.params[(i, site)]
    return BlockResult(losses, best[1])


def finetune_model(model: ToyModel, hooks: QuantHookSet, sequences, prefix=None,
                   cfg: TrainConfig = TrainConfig()):
    """Train blocks 0..n-1 in order; returns ``(model, hooks, report)``.

    Block i's student inputs come from the already-trained quantized blocks
    before it; its teacher is the full-precision block on full-precision inputs.
    """
    check_prefix(model, prefix)
    fp = model
    model = model.copy()
    model.base_fingerprint = fp.base_fingerprint or fp.fingerprint()
    hooks = hooks.copy()
    lead = [] if prefix is not None else [BOS]
    ids = [lead + list(s) for s in sequences]
    if not ids:
        raise TrainingError("fine-tuning needs at least one sequence")
    o = prefix.length if prefix is not None else 0
    h_fp = [fp.embedding[np.asarray(t)] for t in ids]
    h_q = [x.copy() for x in h_fp]
    pos = o + np.arange(len(ids[0]))
    empty = QuantHookSet()
    report = {"config": cfg.to_dict(), "blocks": []}
    for i in range(model.config.n_layers):
        pkv = (prefix.keys[i], prefix.values[i]) if prefix is not None and o else None
        fw = layer_weights(fp, i, empty)
        targets = [run_block(fp, i, h, pos, empty, fw, None, pkv)[0] for h in h_fp]
        res = train_block(model, i, h_q, targets, hooks, cfg, pkv, offset=o)
        report["blocks"].append({"layer": i, "losses": res.losses, "best_epoch": res.best_epoch,
                                 "final_mse": min(res.losses)})
        local = hooks.only_layers({i})
        qw = layer_weights(model, i, local)
        h_q = [run_block(model, i, h, pos, local, qw, None, pkv)[0] for h in h_q]
        h_fp = targets
        model._fp = None
    return model, hooks, report
