"""Planted-outlier toy model: a controllable ground truth for outlier tokens.

Random toy models do not develop massive activations, so this module edits a
random model so that block ``fire_layer`` writes a huge value into one residual
channel at

* every BOS token, and
* the first occurrence of a trigger byte (default ``.``) at a position > 0 of the
  context, unless a trigger already appears earlier in the context.

Mechanics (all with ordinary decoder weights; no extra parameters):

* embedding channels: ``const`` (1 for every token), ``trig`` (1 for the
  trigger byte), ``bos`` (1 for BOS); ``sig`` and ``massive`` start at 0.
* layer 0, head 0 scores keys with a single low-frequency rotary pair so that
  ``score(i, j) ~ G * sin(theta * (i - j)) * trig_j``: zero on the diagonal,
  large for any earlier trigger. Its value reads ``trig`` and its output is
  written to ``sig``. ``sig`` is thus ~1 when an earlier trigger exists and
  ~1/(i+1) otherwise.
* block ``fire_layer``'s MLP has a few neurons gated on
  ``trig - 1.4 * sig - margin * const`` and a few on ``bos - margin * const``;
  their down_proj rows write into ``massive``. The margin term keeps ordinary
  tokens well below threshold even under low-bit activation noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import BOS, ModelConfig, ToyModel, init_random_model
from .tensor import F32, F64, make_rng

TRIGGER = ord(".")


@dataclass(frozen=True)
class PlantedChannels:
    const: int = 0
    trig: int = 1
    sig: int = 2
    bos: int = 3
    massive: int = 4


def _rope_pair(cfg: ModelConfig, margin: int = 16) -> tuple[int, float]:
    """Rotary pair with the highest frequency that stays monotone-positive over max_seq."""
    half = cfg.head_dim // 2
    for k in range(half):
        theta = cfg.rope_theta ** (-2.0 * k / cfg.head_dim)
        if theta * (cfg.max_seq + margin) <= 2.5:
            return k, theta
    raise ValueError("no rotary frequency is low enough for this max_seq; raise rope_theta")


def _norm_scale(row: np.ndarray, eps: float) -> float:
    r = row.astype(F64)
    return 1.0 / math.sqrt(float(np.mean(r * r)) + eps)


def firing_neurons(k: int, intermediate: int) -> tuple[list[int], list[int]]:
    """Two disjoint groups of k MLP neurons whose indices have independent bit patterns.

    Adjacent indices share most Walsh-Hadamard sign patterns, so a rotated spike
    over them collapses onto a handful of values and its rounding error stays
    coherent. Independent bit patterns spread it evenly.
    """
    trig = [1 << j for j in range(k)]
    bos = [(1 << (j + 1)) + 1 for j in range(k)]
    if max(trig + bos) >= intermediate:
        raise ValueError(f"intermediate size {intermediate} too small for {k} firing neurons")
    return trig, bos


def plant_outliers(model: ToyModel, trigger: int = TRIGGER, fire_layer: int = 1,
                   fire_bos: bool = True, magnitude: float = 40.0,
                   neuron_weights=(1.0, 0.7, 0.45, 0.25), margin: float = 0.1,
                   ch: PlantedChannels = PlantedChannels()) -> ToyModel:
    cfg = model.config
    if not 1 <= fire_layer < cfg.n_layers:
        raise ValueError("fire_layer must be >= 1 and inside the model")
    if cfg.hidden < 8 or cfg.intermediate < 2 * len(neuron_weights):
        raise ValueError("model too small for the planted construction")
    m = model.copy()
    planted = [ch.const, ch.trig, ch.sig, ch.bos, ch.massive]
    emb = m.embedding
    emb[:, planted] = 0.0
    emb[:, ch.const] = 1.0
    emb[trigger, ch.trig] = 1.0
    emb[BOS, ch.bos] = 1.0

    n_trig = _norm_scale(emb[trigger], cfg.norm_eps)
    n_const_t = n_trig  # const channel of a trigger row after input norm
    d = cfg.head_dim
    pair, theta = _rope_pair(cfg)

    l0 = m.layers[0]
    qa, kb = pair, pair + d // 2            # head 0 rotary pair (first, second half)
    for col in (qa, kb):
        l0["q_proj"][:, col] = 0.0
        l0["k_proj"][:, col] = 0.0
    # score slope per position ~ ab * n_const * n_trig * sin(theta) / sqrt(d) -> 40
    ab = 40.0 * math.sqrt(d) / (n_const_t * n_trig * math.sin(theta))
    a = b = math.sqrt(ab)
    l0["q_proj"][ch.const, qa] = a
    l0["k_proj"][ch.trig, kb] = b
    vm = 0 if pair != 0 else 1             # value dim of head 0 carrying the trigger flag
    l0["v_proj"][:, vm] = 0.0
    l0["v_proj"][ch.trig, vm] = 1.0
    l0["o_proj"][vm, :] = 0.0
    for li in range(fire_layer + 1):
        layer = m.layers[li]
        layer["o_proj"][:, planted] = 0.0
        layer["down_proj"][:, planted] = 0.0
    l0["o_proj"][vm, ch.sig] = 1.0 / n_trig

    lf = m.layers[fire_layer]
    trig_idx, bos_idx = firing_neurons(len(neuron_weights), cfg.intermediate)
    for j, w in enumerate(neuron_weights):
        for n, gate_rows in ((trig_idx[j], {ch.trig: 1.0, ch.sig: -1.4}), (bos_idx[j], {ch.bos: 1.0})):
            if n in bos_idx and not fire_bos:
                continue
            lf["gate_proj"][:, n] = 0.0
            lf["up_proj"][:, n] = 0.0
            lf["down_proj"][n, :] = 0.0
            for row, coef in gate_rows.items():
                lf["gate_proj"][row, n] = magnitude * w * coef
            # bias through the constant channel keeps ordinary tokens far below threshold
            lf["gate_proj"][ch.const, n] = -magnitude * w * margin
            lf["up_proj"][ch.const, n] = 1.0
            lf["down_proj"][n, ch.massive] = 1.0
    for layer in m.layers:
        for name in layer:
            layer[name] = layer[name].astype(F32)
    m.embedding = emb.astype(F32)
    m._fp = None
    return m


def planted_model(config: ModelConfig | None = None, seed: int = 0, **kw) -> ToyModel:
    config = config or ModelConfig()
    return plant_outliers(init_random_model(config, make_rng(seed)), **kw)
