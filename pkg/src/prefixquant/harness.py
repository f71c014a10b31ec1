"""Experiment orchestration: quantization schemes, error tables and the end-to-end pipeline."""

from __future__ import annotations

import hashlib
import json
import math
from importlib import resources
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .calibrate import CalibConfig, calibrate_model
from .corpus import generate_text
from .finetune import TrainConfig, default_epochs, finetune_model
from .model import (BOS, LINEARS, ModelConfig, QuantHookSet, ToyModel, forward, layer_weights,
                    perplexity, run_block, save_model)
from .outlier import OutlierThresholds, analyze, classify_outliers, token_maxima
from .planted import planted_model
from .prefix import build_prefix_cache, select_prefix, verify_isolation
from .quant import QuantSpec
from .rotation import rotate_model
from .tensor import F64

SCHEMES = ("O1", "O2", "W2", "W3", "W4")


class HarnessError(ValueError):
    pass


def parse_bits(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise HarnessError(f"--bits must be W,A,KV integers, got {text!r}") from exc
    if len(parts) != 3:
        raise HarnessError(f"--bits must have three entries W,A,KV, got {text!r}")
    return parts


def scheme_hooks(scheme: str, bits=(4, 4, 4)) -> QuantHookSet:
    """Hook specs for a scheme.

    O1: per-channel weights, per-token dynamic activations, group-wise dynamic KV.
    O2: per-channel weights, per-tensor static activations, per-head static KV.
    W2/W3/W4: weight-only, group size 128.
    """
    w, a, kv = bits
    if scheme in ("W2", "W3", "W4"):
        wb = int(scheme[1])
        return QuantHookSet({f"weight.{n}": QuantSpec(wb, "group", group_size=128) for n in LINEARS})
    if scheme not in ("O1", "O2"):
        raise HarnessError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    specs = {f"weight.{n}": QuantSpec(w, "per_channel") for n in LINEARS}
    if scheme == "O1":
        specs.update({f"input.{n}": QuantSpec(a, "per_token") for n in LINEARS})
        specs.update({s: QuantSpec(kv, "group", group_size=128) for s in ("K", "V")})
    else:
        specs.update({f"input.{n}": QuantSpec(a, "per_tensor", "static") for n in LINEARS})
        specs.update({s: QuantSpec(kv, "per_head", "static") for s in ("K", "V")})
    return QuantHookSet(specs)


def config_hash(d: dict) -> str:
    return hashlib.sha256(container.dumps_json(d)).hexdigest()[:16]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package for the report ``name`` (e.g. "analysis")."""
    return json.loads(resources.files("prefixquant").joinpath("schemas", f"{name}.json").read_text())


def stamp(report: dict, seed: int, cfg: dict) -> dict:
    report = dict(report)
    report["seed"] = seed
    report["config_hash"] = config_hash(cfg)
    return report


# --------------------------------------------------------------------------- corpus

def windows(data: bytes, n: int, length: int, offset: int = 0) -> list[list[int]]:
    """``n`` consecutive ``length``-byte windows starting at window index ``offset``."""
    need = (offset + n) * length
    if len(data) < need:
        raise HarnessError(f"corpus has {len(data)} bytes, need {need}")
    return [list(data[(offset + i) * length:(offset + i + 1) * length]) for i in range(n)]


# --------------------------------------------------------------------------- error decomposition

def block_errors(model: ToyModel, sequences, hooks: QuantHookSet, prefix=None, layer: int = 1,
                 th: OutlierThresholds = OutlierThresholds()):
    """Per-position block-output squared error at ``layer`` with full-precision input.

    Returns a list of ``(errors, outlier_positions)`` per sequence; outliers are
    the upper-outlier positions of the full-precision block output.
    """
    if not 0 <= layer < model.config.n_layers:
        raise HarnessError(f"measurement block {layer} is outside the model")
    local = hooks.only_layers({layer})
    o = prefix.length if prefix is not None else 0
    pkv = (prefix.keys[layer], prefix.values[layer]) if prefix is not None and o else None
    weights = layer_weights(model, layer, local)
    out = []
    for seq in sequences:
        ids = list(seq) if prefix is not None else [BOS] + list(seq)
        res = forward(model, ids, prefix=prefix, capture=("block_out",), n_layers=layer + 1)
        h_in = res.acts[(layer - 1, "block_out")] if layer else model.embedding[np.asarray(ids)]
        ref = res.acts[(layer, "block_out")]
        pos = o + np.arange(len(ids))
        q, _, _ = run_block(model, layer, h_in, pos, local, weights, None, pkv)
        err = np.mean((q.astype(F64) - ref.astype(F64)) ** 2, axis=1)
        upper, _, _ = classify_outliers(token_maxima(ref), th)
        out.append((err, upper))
    return out


def error_decomposition(model: ToyModel, sequences, hooks: QuantHookSet | None = None, prefix=None,
                        layer: int = 1, bits: int = 4,
                        th: OutlierThresholds = OutlierThresholds()) -> dict:
    """Block-output MSE split into the share carried by outlier tokens and by the rest."""
    if hooks is None:
        hooks = QuantHookSet({f"input.{n}": QuantSpec(bits, "per_token") for n in LINEARS})
    rows = block_errors(model, sequences, hooks, prefix, layer, th)
    total = sum(float(e.sum()) for e, _ in rows)
    n = sum(e.size for e, _ in rows)
    out_err = sum(float(e[u].sum()) for e, u in rows)
    n_out = sum(len(u) for _, u in rows)
    share = out_err / total if total > 0 else 0.0
    return {
        "mse": total / n,
        "outlier_share": 100.0 * share,
        "remaining_share": 100.0 * (1.0 - share),
        "n_tokens": n,
        "n_outlier_tokens": n_out,
        "mse_without_outlier_error": (total - out_err) / n,
    }


def error_table(model: ToyModel, sequences, seed: int = 0, layer: int = 1, bits: int = 4,
                th: OutlierThresholds = OutlierThresholds(), order: str = "listed") -> dict:
    """Error decomposition for no mitigation, rotation only and rotation + prefix."""
    rotated = rotate_model(model, seed)
    rep = analyze(rotated, sequences, th)
    plan = select_prefix(rep, max(rep.o, 1))
    cache = build_prefix_cache(rotated, plan, order)
    rows = {
        "none": error_decomposition(model, sequences, None, None, layer, bits, th),
        "rotation": error_decomposition(rotated, sequences, None, None, layer, bits, th),
        "rotation+prefix": error_decomposition(rotated, sequences, None, cache, layer, bits, th),
    }
    return {"layer": layer, "bits": bits, "plan": list(plan.token_ids), "rows": rows}


# --------------------------------------------------------------------------- pipeline

@dataclass
class PipelineConfig:
    scheme: str = "O2"
    bits: tuple[int, int, int] = (4, 4, 4)
    rotation: bool = True
    prefix: bool = True
    seed: int = 0
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    planted: bool = True
    corpus_bytes: int = 0
    n_calib: int = 8
    n_train: int = 64
    n_eval: int = 8
    seq_len: int = 256
    grid_min: float = 0.5
    grid_step: float = 0.01
    s_points: int = 100
    epochs: int | None = None
    lr_qparams: float = 5e-5
    lr_weights: float = 5e-6
    batch: int = 4
    eta1: float = 64.0
    eta2: float = 8.0
    prefix_order: str = "listed"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bits"] = list(self.bits)
        return d

    def calib(self) -> CalibConfig:
        from .calibrate import clip_grid
        grid = clip_grid(self.grid_min, 1.0, self.grid_step)
        return CalibConfig(self.n_calib, self.seq_len, grid, grid, self.s_points)

    def train(self) -> TrainConfig:
        act_bits = self.bits[1] if self.scheme in ("O1", "O2") else None
        epochs = self.epochs if self.epochs is not None else default_epochs(act_bits)
        return TrainConfig(self.lr_qparams, self.lr_weights, self.batch, epochs,
                           n_samples=self.n_train, seq_len=self.seq_len, seed=self.seed)


def run_pipeline(cfg: PipelineConfig, out_dir, model: ToyModel | None = None,
                 corpus: bytes | None = None, log=None) -> dict:
    """rotate -> analyze -> find prefix -> build cache -> calibrate -> finetune -> eval."""
    log = log or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cd = cfg.to_dict()
    th = OutlierThresholds(cfg.eta1, cfg.eta2)
    if model is None:
        mcfg = ModelConfig.from_dict(cfg.model)
        if cfg.planted:
            model = planted_model(mcfg, cfg.seed)
        else:
            from .model import init_random_model
            from .tensor import make_rng
            model = init_random_model(mcfg, make_rng(cfg.seed))
    n_windows = max(cfg.n_calib, cfg.n_train) + cfg.n_eval
    if corpus is None:
        corpus = generate_text(max(cfg.corpus_bytes, n_windows * cfg.seq_len + 1), cfg.seed)
    train_seqs = windows(corpus, max(cfg.n_calib, cfg.n_train), cfg.seq_len)
    calib_seqs = train_seqs[:cfg.n_calib]
    eval_start = max(cfg.n_calib, cfg.n_train) * cfg.seq_len
    eval_tokens = list(corpus[eval_start:eval_start + cfg.n_eval * cfg.seq_len + 1])
    files = {}

    def emit(name, report):
        write_json(out / name, stamp(report, cfg.seed, cd))
        files[name.split(".")[0]] = name

    log("rotate")
    base = model
    if cfg.rotation:
        model = rotate_model(model, cfg.seed)
    save_model(model, out / "model_fp.pqt")
    files["model_fp"] = "model_fp.pqt"

    log("analyze")
    rep = analyze(model, calib_seqs, th)
    emit("analysis.json", rep.to_json())
    (out / "maxima.csv").write_text(rep.maxima_csv())
    files["maxima"] = "maxima.csv"

    cache = None
    if cfg.prefix:
        log("find-prefix")
        plan = select_prefix(rep, max(rep.o, 1))
        cache = build_prefix_cache(model, plan, cfg.prefix_order)
        cache.save(out / "prefix.pqt")
        files["prefix_cache"] = "prefix.pqt"
        iso = verify_isolation(model, cache, calib_seqs, th)
        emit("prefix.json", {"plan": plan.to_json(), "order": cfg.prefix_order,
                             "residual_upper": iso["residual_upper"],
                             "baseline_upper": iso["baseline_upper"],
                             "with_prefix": iso["with_prefix"]})

    log("calibrate")
    hooks, calib_rep = calibrate_model(model, scheme_hooks(cfg.scheme, cfg.bits), calib_seqs,
                                       cache, cfg.calib())
    emit("calibration.json", calib_rep)
    save_model(model, out / "model_calibrated.pqt", hooks)
    files["model_calibrated"] = "model_calibrated.pqt"

    log("finetune")
    tcfg = cfg.train()
    tuned, tuned_hooks, ft_rep = finetune_model(model, hooks, train_seqs[:cfg.n_train], cache, tcfg)
    emit("finetune.json", ft_rep)
    save_model(tuned, out / "model_quant.pqt", tuned_hooks)
    files["model_quant"] = "model_quant.pqt"

    log("eval")
    ctx = min(cfg.seq_len, model.config.max_seq - (cache.length if cache else 1))
    ev = {
        "context_len": ctx,
        "ppl_fp": perplexity(model, eval_tokens, None, cache, ctx),
        "ppl_calibrated": perplexity(model, eval_tokens, hooks, cache, ctx),
        "ppl_finetuned": perplexity(tuned, eval_tokens, tuned_hooks, cache, ctx),
        "ppl_train_calibrated": perplexity(model, _flat(train_seqs[:cfg.n_train]), hooks, cache, ctx),
        "ppl_train_finetuned": perplexity(tuned, _flat(train_seqs[:cfg.n_train]), tuned_hooks, cache, ctx),
    }
    emit("eval.json", ev)

    log("error-table")
    emit("error_table.json", error_table(base, calib_seqs, cfg.seed, min(1, model.config.n_layers - 1),
                                         cfg.bits[1] if cfg.scheme in ("O1", "O2") else 4, th,
                                         cfg.prefix_order))

    summary = {"scheme": cfg.scheme, "bits": list(cfg.bits), "files": files,
               "o": rep.o, "plan": list(cache.plan.token_ids) if cache else [],
               "eval": ev, "model_fingerprint": tuned.fingerprint()}
    emit("pipeline.json", summary)
    return stamp(summary, cfg.seed, cd)


def _flat(seqs) -> list[int]:
    return [t for s in seqs for t in s]


def eval_report(model: ToyModel, tokens, hooks=None, prefix=None, context_len: int = 256) -> dict:
    ctx = min(context_len, model.config.max_seq - (prefix.length if prefix else 1))
    if len(tokens) < ctx + 1:
        raise HarnessError(f"evaluation corpus of {len(tokens)} bytes is shorter than {ctx + 1}")
    ppl = perplexity(model, tokens, hooks, prefix, ctx)
    return {"context_len": ctx, "perplexity": ppl, "nll": math.log(ppl),
            "quantized": bool(hooks), "prefixed": prefix is not None,
            "model_fingerprint": model.fingerprint()}
