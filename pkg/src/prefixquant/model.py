"""Toy Llama-style decoder: config, weights, byte tokenizer, hooks and forward pass."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .attention import attention_with_prefix
from .quant import QuantParams, QuantSpec, dynamic_quantize_site, fake_quant, fit_params
from .rotation import HadamardSpec, online_rotate
from .tensor import F32, F64, add, matmul, mul, rmsnorm, rope_apply, silu

BOS = 256
VOCAB = 257

LINEARS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
RESIDUAL_WRITERS = ("o_proj", "down_proj")
WEIGHT_SITES = tuple(f"weight.{n}" for n in LINEARS)
INPUT_SITES = tuple(f"input.{n}" for n in LINEARS)
KV_SITES = ("Q", "K", "V")
SITES = WEIGHT_SITES + INPUT_SITES + KV_SITES

CAPTURE_SITES = ("attn_in", "Q", "K", "V", "o_in", "resid_mid", "mlp_in", "down_in", "block_out")


class ModelError(ValueError):
    pass


class SequenceOverflowError(ModelError):
    pass


class UnknownSiteError(ModelError):
    pass


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden: int = 256
    n_heads: int = 4
    head_dim: int = 64
    intermediate: int = 512
    vocab: int = VOCAB
    max_seq: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden != self.n_heads * self.head_dim:
            raise ModelError(f"hidden {self.hidden} != n_heads {self.n_heads} x head_dim {self.head_dim}")
        for name in ("hidden", "head_dim", "intermediate"):
            if not _pow2(getattr(self, name)):
                raise ModelError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.n_layers < 1 or self.max_seq < 1:
            raise ModelError("n_layers and max_seq must be positive")
        if self.vocab != VOCAB:
            raise ModelError(f"byte-level vocab is {VOCAB}, got {self.vocab}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def weight_shape(self, name: str) -> tuple[int, int]:
        c, f = self.hidden, self.intermediate
        return {
            "q_proj": (c, c), "k_proj": (c, c), "v_proj": (c, c), "o_proj": (c, c),
            "gate_proj": (c, f), "up_proj": (c, f), "down_proj": (f, c),
        }[name]


@dataclass
class RotationInfo:
    """Which Hadamard sites are active and the online transforms forward() must apply."""

    seed: int
    sites: tuple[str, ...] = ()
    r3: HadamardSpec | None = None
    r4: HadamardSpec | None = None

    def to_meta(self) -> dict:
        return {"seed": self.seed, "sites": list(self.sites)}


@dataclass
class ToyModel:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[dict[str, np.ndarray]]
    final_norm: np.ndarray
    lm_head: np.ndarray
    rotation: RotationInfo | None = None
    base_fingerprint: str | None = None
    _fp: str | None = field(default=None, repr=False, compare=False)

    def copy(self) -> "ToyModel":
        return ToyModel(
            self.config,
            self.embedding.copy(),
            [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            self.final_norm.copy(),
            self.lm_head.copy(),
            self.rotation,
            self.base_fingerprint,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "final_norm": self.final_norm, "lm_head": self.lm_head}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layers.{i}.{k}"] = v
        if self.rotation is not None:
            if self.rotation.r3 is not None:
                out["rotation/r3_signs"] = self.rotation.r3.sign_diag.astype(F32)
            if self.rotation.r4 is not None:
                out["rotation/r4_signs"] = self.rotation.r4.sign_diag.astype(F32)
        return out

    def fingerprint(self) -> str:
        if self._fp is None:
            h = hashlib.sha256()
            h.update(container.dumps_json(self.config.to_dict()))
            if self.rotation is not None:
                h.update(container.dumps_json(self.rotation.to_meta()))
            for name, arr in sorted(self.tensors().items()):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            self._fp = h.hexdigest()
        return self._fp

    def lineage(self) -> set[str]:
        fps = {self.fingerprint()}
        if self.base_fingerprint:
            fps.add(self.base_fingerprint)
        return fps


@dataclass
class KvCache:
    keys: list[np.ndarray]
    values: list[np.ndarray]

    @classmethod
    def empty(cls, config: ModelConfig) -> "KvCache":
        shape = (0, config.n_heads, config.head_dim)
        return cls([np.zeros(shape, F32) for _ in range(config.n_layers)],
                   [np.zeros(shape, F32) for _ in range(config.n_layers)])

    @property
    def length(self) -> int:
        lengths = {k.shape[0] for k in self.keys}
        if len(lengths) != 1:
            raise ModelError(f"ragged cache lengths {sorted(lengths)}")
        return lengths.pop()


# --------------------------------------------------------------------------- tokenizer

def tokenize(data: bytes) -> list[int]:
    return list(bytes(data))


def detokenize(ids) -> bytes:
    return bytes(i for i in ids if i != BOS)


# --------------------------------------------------------------------------- hooks

class QuantHookSet:
    """Quantization specs per site name plus fitted parameters per (layer, site).

    Sites: ``weight.<linear>``, ``input.<linear>``, ``Q``, ``K``, ``V``. A site
    that is absent stays in full precision.
    """

    def __init__(self, specs: dict[str, QuantSpec] | None = None,
                 params: dict[tuple[int, str], QuantParams] | None = None,
                 layers: frozenset[int] | None = None):
        specs = dict(specs or {})
        for site in specs:
            if site not in SITES:
                raise UnknownSiteError(f"unknown hook site {site!r}")
        self.specs = specs
        self.params = dict(params or {})
        self.layers = layers

    def __bool__(self) -> bool:
        return bool(self.specs)

    def copy(self) -> "QuantHookSet":
        return QuantHookSet(self.specs, {k: v.copy() for k, v in self.params.items()}, self.layers)

    def only_layers(self, layers) -> "QuantHookSet":
        return QuantHookSet(self.specs, self.params, frozenset(layers))

    def without(self, *sites: str) -> "QuantHookSet":
        specs = {k: v for k, v in self.specs.items() if k not in sites}
        params = {k: v for k, v in self.params.items() if k[1] not in sites}
        return QuantHookSet(specs, params, self.layers)

    def spec(self, layer: int, site: str) -> QuantSpec | None:
        if self.layers is not None and layer not in self.layers:
            return None
        return self.specs.get(site)

    def get(self, layer: int, site: str) -> QuantParams | None:
        return self.params.get((layer, site))

    def set(self, layer: int, site: str, params: QuantParams) -> None:
        if site not in self.specs:
            raise UnknownSiteError(f"site {site!r} has no spec")
        self.params[(layer, site)] = params

    def activation(self, layer: int, site: str, x: np.ndarray) -> np.ndarray:
        spec = self.spec(layer, site)
        if spec is None:
            return x
        role = "kv" if site in KV_SITES else "activation"
        p = self.get(layer, site)
        if spec.mode == "dynamic":
            g, b = (p.gamma, p.beta) if p is not None else (1.0, 1.0)
            return dynamic_quantize_site(x, spec, g, b, role)
        if p is None or p.s is None:
            raise ModelError(f"static site {site} in layer {layer} has no calibrated parameters")
        return fake_quant(x, p, spec, role)

    def weight(self, layer: int, name: str, w: np.ndarray) -> np.ndarray:
        site = f"weight.{name}"
        spec = self.spec(layer, site)
        if spec is None:
            return w
        p = self.get(layer, site)
        if p is None or p.s is None:
            p = fit_params(w, spec, 1.0, 1.0, "weight")
        return fake_quant(w, p, spec, "weight")

    def to_meta(self) -> dict:
        clip = {f"{l}:{s}": [p.gamma, p.beta] for (l, s), p in sorted(self.params.items())}
        return {"specs": {k: v.to_dict() for k, v in sorted(self.specs.items())}, "clip": clip}

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for (l, s), p in sorted(self.params.items()):
            if p.s is not None:
                out[f"qparams/{l}/{s}/s"] = p.s.astype(F32)
                out[f"qparams/{l}/{s}/z"] = p.z.astype(F32)
        return out

    @classmethod
    def from_container(cls, meta: dict, tensors: dict[str, np.ndarray]) -> "QuantHookSet":
        specs = {k: QuantSpec.from_dict(v) for k, v in meta.get("specs", {}).items()}
        params = {}
        for key, (g, b) in meta.get("clip", {}).items():
            l, s = key.split(":", 1)
            l = int(l)
            sv = tensors.get(f"qparams/{l}/{s}/s")
            zv = tensors.get(f"qparams/{l}/{s}/z")
            params[(l, s)] = QuantParams(sv, zv, float(g), float(b), specs[s].qmax)
        return cls(specs, params)


# --------------------------------------------------------------------------- construction

def init_random_model(config: ModelConfig, rng: np.random.Generator) -> ToyModel:
    base = 0.02
    resid = 0.02 / math.sqrt(2 * config.n_layers)

    def draw(shape, std):
        return (rng.standard_normal(shape) * std).astype(F32)

    embedding = draw((config.vocab, config.hidden), base)
    layers = []
    for _ in range(config.n_layers):
        layer = {}
        for name in LINEARS:
            layer[name] = draw(config.weight_shape(name), resid if name in RESIDUAL_WRITERS else base)
        layer["input_norm"] = np.ones(config.hidden, F32)
        layer["post_norm"] = np.ones(config.hidden, F32)
        layers.append(layer)
    lm_head = draw((config.hidden, config.vocab), base)
    return ToyModel(config, embedding, layers, np.ones(config.hidden, F32), lm_head)


def check_shapes(model: ToyModel) -> None:
    cfg = model.config
    expect = {"embedding": (cfg.vocab, cfg.hidden), "final_norm": (cfg.hidden,),
              "lm_head": (cfg.hidden, cfg.vocab)}
    for name, shape in expect.items():
        if getattr(model, name).shape != shape:
            raise ModelError(f"{name} has shape {getattr(model, name).shape}, expected {shape}")
    if len(model.layers) != cfg.n_layers:
        raise ModelError(f"{len(model.layers)} layers, config says {cfg.n_layers}")
    for i, layer in enumerate(model.layers):
        for name in LINEARS:
            if layer[name].shape != cfg.weight_shape(name):
                raise ModelError(f"layer {i} {name} has shape {layer[name].shape}")
        for name in ("input_norm", "post_norm"):
            if layer[name].shape != (cfg.hidden,):
                raise ModelError(f"layer {i} {name} has shape {layer[name].shape}")


# --------------------------------------------------------------------------- forward

@dataclass
class ForwardResult:
    logits: np.ndarray
    acts: dict[tuple[int, str], np.ndarray]
    cache: KvCache


def _wanted(capture, name: str) -> bool:
    if capture is None:
        return False
    if capture is True:
        return True
    return name in capture


def run_block(model: ToyModel, i: int, h: np.ndarray, positions: np.ndarray,
              hooks: QuantHookSet, weights: dict[str, np.ndarray],
              past: tuple[np.ndarray, np.ndarray] | None = None,
              prefix_kv: tuple[np.ndarray, np.ndarray] | None = None,
              capture=None, acts: dict | None = None):
    """One decoder block. Returns ``(h_out, k_new, v_new)`` with k/v as stored in the cache."""
    acts = acts if acts is not None else {}
    attn, k, v = block_attention(model, i, h, positions, hooks, weights, past, prefix_kv, capture, acts)
    return block_tail(model, i, h, "o_in", attn, hooks, weights, capture, acts), k, v


def _keeper(i, capture, acts):
    def keep(name, x):
        if _wanted(capture, name):
            acts[(i, name)] = x
    return keep


def block_attention(model: ToyModel, i: int, h: np.ndarray, positions: np.ndarray,
                    hooks: QuantHookSet, weights: dict[str, np.ndarray], past=None, prefix_kv=None,
                    capture=None, acts: dict | None = None):
    """Attention half of a block up to the o_proj input. Returns ``(attn, k_new, v_new)``."""
    cfg = model.config
    layer = model.layers[i]
    t = h.shape[0]
    rot = model.rotation
    keep = _keeper(i, capture, acts if acts is not None else {})
    x = rmsnorm(h, layer["input_norm"], cfg.norm_eps)
    keep("attn_in", x)
    q = matmul(hooks.activation(i, "input.q_proj", x), weights["q_proj"])
    k = matmul(hooks.activation(i, "input.k_proj", x), weights["k_proj"])
    v = matmul(hooks.activation(i, "input.v_proj", x), weights["v_proj"])
    shape = (t, cfg.n_heads, cfg.head_dim)
    q = rope_apply(q.reshape(shape), positions, cfg.rope_theta)
    k = rope_apply(k.reshape(shape), positions, cfg.rope_theta)
    v = v.reshape(shape)
    if rot is not None and rot.r3 is not None:
        q = online_rotate(q, rot.r3)
        k = online_rotate(k, rot.r3)
    keep("Q", q)
    keep("K", k)
    keep("V", v)
    q = hooks.activation(i, "Q", q)
    k = hooks.activation(i, "K", k)
    v = hooks.activation(i, "V", v)
    if past is not None and past[0].shape[0]:
        k_all = np.concatenate([past[0], k], axis=0)
        v_all = np.concatenate([past[1], v], axis=0)
    else:
        k_all, v_all = k, v
    kp, vp = prefix_kv if prefix_kv is not None else (None, None)
    attn = attention_with_prefix(q, k_all, v_all, kp, vp).reshape(t, cfg.hidden)
    keep("o_in", attn)
    return attn, k, v


def block_tail(model: ToyModel, i: int, h: np.ndarray, stage: str, x: np.ndarray,
               hooks: QuantHookSet, weights: dict[str, np.ndarray], capture=None,
               acts: dict | None = None) -> np.ndarray:
    """Finish a block from an intermediate point.

    ``stage`` is ``"o_in"`` (``x`` is the attention output, ``h`` the block
    input) or ``"mlp_in"`` (``x`` is ignored, ``h`` the residual after attention).
    """
    cfg = model.config
    layer = model.layers[i]
    rot = model.rotation
    keep = _keeper(i, capture, acts if acts is not None else {})
    if stage == "o_in":
        o = matmul(hooks.activation(i, "input.o_proj", x), weights["o_proj"])
        h = add(h, o)
        keep("resid_mid", h)
    elif stage != "mlp_in":
        raise ModelError(f"unknown block stage {stage!r}")
    x = rmsnorm(h, layer["post_norm"], cfg.norm_eps)
    keep("mlp_in", x)
    gate = matmul(hooks.activation(i, "input.gate_proj", x), weights["gate_proj"])
    up = matmul(hooks.activation(i, "input.up_proj", x), weights["up_proj"])
    act = mul(silu(gate), up)
    if rot is not None and rot.r4 is not None:
        act = online_rotate(act, rot.r4)
    keep("down_in", act)
    down = matmul(hooks.activation(i, "input.down_proj", act), weights["down_proj"])
    h = add(h, down)
    keep("block_out", h)
    return h


def layer_weights(model: ToyModel, i: int, hooks: QuantHookSet) -> dict[str, np.ndarray]:
    return {name: hooks.weight(i, name, model.layers[i][name]) for name in LINEARS}


def check_prefix(model: ToyModel, prefix) -> None:
    if prefix is None:
        return
    if prefix.fingerprint not in model.lineage():
        raise ModelError("prefix cache was built for a different model")


def forward(model: ToyModel, tokens, hooks: QuantHookSet | None = None,
            cache: KvCache | None = None, prefix=None, capture=None,
            n_layers: int | None = None) -> ForwardResult:
    """Run the decoder over ``tokens`` appended after (prefix, cache).

    ``capture`` is None, True (everything) or an iterable of names from
    ``CAPTURE_SITES``; captured tensors are pre-quantization. ``n_layers`` stops
    after that many blocks (logits are then None).
    """
    cfg = model.config
    hooks = hooks if hooks is not None else QuantHookSet()
    if capture not in (None, True):
        capture = set(capture)
        bad = capture - set(CAPTURE_SITES)
        if bad:
            raise UnknownSiteError(f"unknown capture sites {sorted(bad)}")
    tokens = np.asarray(list(tokens), dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ModelError("forward needs a non-empty 1-D token list")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ModelError(f"token ids must lie in [0, {cfg.vocab})")
    check_prefix(model, prefix)
    o = prefix.length if prefix is not None else 0
    past_len = cache.length if cache is not None else 0
    if o + past_len + tokens.size > cfg.max_seq:
        raise SequenceOverflowError(
            f"prefix {o} + cache {past_len} + {tokens.size} new tokens exceeds max_seq {cfg.max_seq}")
    positions = o + past_len + np.arange(tokens.size)
    h = model.embedding[tokens]
    acts: dict = {}
    new_k, new_v = [], []
    stop = cfg.n_layers if n_layers is None else n_layers
    for i in range(stop):
        w = layer_weights(model, i, hooks)
        past = (cache.keys[i], cache.values[i]) if cache is not None else None
        pkv = (prefix.keys[i], prefix.values[i]) if prefix is not None and o else None
        h, k, v = run_block(model, i, h, positions, hooks, w, past, pkv, capture, acts)
        if past is not None:
            k = np.concatenate([past[0], k], axis=0)
            v = np.concatenate([past[1], v], axis=0)
        new_k.append(k)
        new_v.append(v)
    logits = None
    if stop == cfg.n_layers:
        logits = matmul(rmsnorm(h, model.final_norm, cfg.norm_eps), model.lm_head)
    else:
        new_k += [np.zeros((0, cfg.n_heads, cfg.head_dim), F32)] * (cfg.n_layers - stop)
        new_v += [np.zeros((0, cfg.n_heads, cfg.head_dim), F32)] * (cfg.n_layers - stop)
    return ForwardResult(logits, acts, KvCache(new_k, new_v))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(F64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def perplexity(model: ToyModel, tokens, hooks: QuantHookSet | None = None, prefix=None,
               context_len: int = 256) -> float:
    """exp(mean NLL) over non-overlapping windows of ``context_len`` scored targets.

    Each window is fed BOS-led unless a prefix cache (which ends with BOS) is
    given; neither BOS nor the prefix is ever a scored target.
    """
    tokens = list(tokens)
    if len(tokens) < context_len + 1:
        raise ModelError(f"corpus of {len(tokens)} tokens is shorter than context_len + 1 = {context_len + 1}")
    lead = [] if prefix is not None else [BOS]
    total, count = 0.0, 0
    for start in range(0, len(tokens) - context_len, context_len):
        window = tokens[start:start + context_len + 1]
        res = forward(model, lead + window[:-1], hooks, prefix=prefix)
        lp = log_softmax(res.logits[len(lead):])
        total -= float(lp[np.arange(context_len), window[1:]].sum())
        count += context_len
    return math.exp(total / count)


# --------------------------------------------------------------------------- container I/O

def save_model(model: ToyModel, path, hooks: QuantHookSet | None = None, extra: dict | None = None) -> None:
    tensors = dict(model.tensors())
    meta = {"kind": "model", "config": model.config.to_dict(),
            "rotation": model.rotation.to_meta() if model.rotation else None,
            "base_fingerprint": model.base_fingerprint}
    if hooks is not None:
        tensors.update(hooks.to_tensors())
        meta["hooks"] = hooks.to_meta()
    if extra:
        meta["extra"] = extra
    container.write(path, tensors, meta)


def _model_from(tensors: dict, meta: dict) -> ToyModel:
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise container.LayoutError(f"missing or malformed config: {exc}") from exc
    try:
        layers = []
        for i in range(cfg.n_layers):
            layers.append({k: tensors[f"layers.{i}.{k}"] for k in LINEARS + ("input_norm", "post_norm")})
        model = ToyModel(cfg, tensors["embedding"], layers, tensors["final_norm"], tensors["lm_head"],
                         base_fingerprint=meta.get("base_fingerprint"))
    except KeyError as exc:
        raise container.LayoutError(f"missing tensor {exc}") from exc
    try:
        check_shapes(model)
    except ModelError as exc:
        raise container.LayoutError(str(exc)) from exc
    rot = meta.get("rotation")
    if rot:
        r3 = r4 = None
        if "rotation/r3_signs" in tensors:
            r3 = HadamardSpec(cfg.head_dim, tensors["rotation/r3_signs"].astype(F64), "R3")
        if "rotation/r4_signs" in tensors:
            r4 = HadamardSpec(cfg.intermediate, tensors["rotation/r4_signs"].astype(F64), "R4")
        model.rotation = RotationInfo(int(rot["seed"]), tuple(rot["sites"]), r3, r4)
    return model


def load_model(path) -> ToyModel:
    tensors, meta = container.read(path)
    return _model_from(tensors, meta)


def load_model_and_hooks(path) -> tuple[ToyModel, QuantHookSet | None]:
    tensors, meta = container.read(path)
    model = _model_from(tensors, meta)
    hooks = QuantHookSet.from_container(meta["hooks"], tensors) if meta.get("hooks") else None
    return model, hooks
