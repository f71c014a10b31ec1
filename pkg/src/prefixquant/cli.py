"""Command-line entry point: ``prefixquant <subcommand> ...``."""

from __future__ import annotations

import os

# Thread caps must be in place before numpy loads its BLAS.
_threads = os.environ.get("PREFIXQUANT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import container  # noqa: E402
from .calibrate import CalibConfig, calibrate_model, clip_grid  # noqa: E402
from .corpus import generate_text  # noqa: E402
from .finetune import TrainConfig, default_epochs, finetune_model  # noqa: E402
from .harness import (SCHEMES, HarnessError, PipelineConfig, error_table, eval_report,  # noqa: E402
                      parse_bits, run_pipeline, scheme_hooks, stamp, windows, write_json)
from .model import ModelConfig, init_random_model, load_model_and_hooks, save_model  # noqa: E402
from .outlier import OutlierThresholds, analyze  # noqa: E402
from .planted import planted_model  # noqa: E402
from .prefix import ORDERS, PrefixCache, build_prefix_cache, select_prefix, verify_isolation  # noqa: E402
from .rotation import SITES, rotate_model  # noqa: E402
from .tensor import make_rng  # noqa: E402


def _read_corpus(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {p}")
    return p.read_bytes()


def _load(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {p}")
    return load_model_and_hooks(p)


def _prefix(path):
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"prefix cache not found: {p}")
    return PrefixCache.load(p)


def _th(args) -> OutlierThresholds:
    return OutlierThresholds(args.eta1, args.eta2)


_OUTPUTS = ("func", "out", "report", "csv")


def _cfg(args) -> dict:
    # output destinations do not change what is computed, so they stay out of the hash
    return {k: v for k, v in sorted(vars(args).items()) if k not in _OUTPUTS}


# --------------------------------------------------------------------------- subcommands

def cmd_gen_model(args) -> None:
    cfg = ModelConfig(n_layers=args.layers, hidden=args.hidden, n_heads=args.heads,
                      head_dim=args.hidden // args.heads, intermediate=args.intermediate,
                      max_seq=args.max_seq)
    model = planted_model(cfg, args.seed) if args.planted else init_random_model(cfg, make_rng(args.seed))
    save_model(model, args.out, extra={"seed": args.seed, "planted": args.planted})


def cmd_gen_corpus(args) -> None:
    Path(args.out).write_bytes(generate_text(args.bytes, args.seed))


def cmd_analyze(args) -> None:
    model, _ = _load(args.model)
    seqs = windows(_read_corpus(args.corpus), args.n_samples, args.seq_len)
    rep = analyze(model, seqs, _th(args), prefix=_prefix(args.prefix))
    write_json(args.out, stamp(rep.to_json(), args.seed, _cfg(args)))
    if args.csv:
        Path(args.csv).write_text(rep.maxima_csv())


def cmd_find_prefix(args) -> None:
    model, _ = _load(args.model)
    seqs = windows(_read_corpus(args.corpus), args.n_samples, args.seq_len)
    th = _th(args)
    rep = analyze(model, seqs, th)
    o = args.o if args.o is not None else max(rep.o, 1)
    plan = select_prefix(rep, o)
    cache = build_prefix_cache(model, plan, args.prefix_order)
    cache.save(args.out)
    if args.report:
        iso = verify_isolation(model, cache, seqs, th)
        report = {"plan": plan.to_json(), "order": args.prefix_order, "detected_o": rep.o,
                  "residual_upper": iso["residual_upper"], "baseline_upper": iso["baseline_upper"],
                  "with_prefix": iso["with_prefix"]}
        write_json(args.report, stamp(report, args.seed, _cfg(args)))


def cmd_rotate(args) -> None:
    model, hooks = _load(args.model)
    if hooks:
        raise HarnessError("rotate expects a full-precision model without quantization hooks")
    sites = tuple(s.strip() for s in args.sites.split(",") if s.strip())
    save_model(rotate_model(model, args.seed, sites), args.out)


def _calib_config(args) -> CalibConfig:
    grid = clip_grid(args.grid_min, 1.0, args.grid_step)
    return CalibConfig(args.n_samples, args.seq_len, grid, grid, args.grid_s_points)


def cmd_calibrate(args) -> None:
    model, _ = _load(args.model)
    seqs = windows(_read_corpus(args.corpus), args.n_samples, args.seq_len)
    hooks = scheme_hooks(args.scheme, parse_bits(args.bits))
    fitted, rep = calibrate_model(model, hooks, seqs, _prefix(args.prefix), _calib_config(args),
                                  timing=args.timing)
    save_model(model, args.out, fitted)
    if args.report:
        write_json(args.report, stamp(rep, args.seed, _cfg(args)))


def cmd_finetune(args) -> None:
    model, hooks = _load(args.model)
    if not hooks:
        raise HarnessError(f"{args.model} carries no quantization hooks; run calibrate first")
    seqs = windows(_read_corpus(args.corpus), args.n_samples, args.seq_len)
    act = [s for s in hooks.specs if s.startswith("input.")]
    epochs = args.epochs if args.epochs is not None else default_epochs(
        hooks.specs[act[0]].bits if act else None)
    cfg = TrainConfig(args.lr_q, args.lr_w, args.batch, epochs, n_samples=args.n_samples,
                      seq_len=args.seq_len, seed=args.seed)
    tuned, tuned_hooks, rep = finetune_model(model, hooks, seqs, _prefix(args.prefix), cfg)
    save_model(tuned, args.out, tuned_hooks)
    if args.report:
        write_json(args.report, stamp(rep, args.seed, _cfg(args)))


def cmd_eval(args) -> None:
    model, hooks = _load(args.model)
    data = _read_corpus(args.corpus)
    tokens = list(data[args.offset:args.offset + args.n_bytes] if args.n_bytes else data[args.offset:])
    rep = eval_report(model, tokens, None if args.fp else hooks, _prefix(args.prefix), args.context_len)
    write_json(args.out, stamp(rep, args.seed, _cfg(args)))


def cmd_error_table(args) -> None:
    model, _ = _load(args.model)
    seqs = windows(_read_corpus(args.corpus), args.n_samples, args.seq_len)
    rep = error_table(model, seqs, args.seed, args.layer, args.act_bits, _th(args), args.prefix_order)
    write_json(args.out, stamp(rep, args.seed, _cfg(args)))


def cmd_pipeline(args) -> None:
    mcfg = ModelConfig(n_layers=args.layers, hidden=args.hidden, n_heads=args.heads,
                       head_dim=args.hidden // args.heads, intermediate=args.intermediate,
                       max_seq=args.max_seq)
    cfg = PipelineConfig(
        scheme=args.scheme, bits=parse_bits(args.bits), rotation=not args.no_rotation,
        prefix=not args.no_prefix, seed=args.seed, model=mcfg.to_dict(), planted=not args.random_model,
        n_calib=args.n_calib, n_train=args.n_train, n_eval=args.n_eval, seq_len=args.seq_len,
        grid_min=args.grid_min, grid_step=args.grid_step, s_points=args.grid_s_points,
        epochs=args.epochs, lr_qparams=args.lr_q, lr_weights=args.lr_w, batch=args.batch,
        eta1=args.eta1, eta2=args.eta2, prefix_order=args.prefix_order)
    model = None
    if args.model:
        model, hooks = _load(args.model)
        if hooks:
            raise HarnessError("pipeline expects a full-precision model")
        cfg.model = model.config.to_dict()
    corpus = _read_corpus(args.corpus) if args.corpus else None
    log = (lambda m: print(f"[pipeline] {m}", file=sys.stderr)) if args.verbose else None
    run_pipeline(cfg, args.out, model, corpus, log)


# --------------------------------------------------------------------------- parser

def _common(p, model=True, corpus=True, samples=(8, 256)):
    if model:
        p.add_argument("--model", required=True, help="model container file")
    if corpus:
        p.add_argument("--corpus", required=True, help="byte corpus file")
        p.add_argument("--n-samples", type=int, default=samples[0])
        p.add_argument("--seq-len", type=int, default=samples[1])
    p.add_argument("--seed", type=int, default=0)


def _thresholds(p):
    p.add_argument("--eta1", type=float, default=64.0, help="upper-outlier ratio threshold")
    p.add_argument("--eta2", type=float, default=8.0, help="lower-outlier ratio threshold")


def _grid(p):
    p.add_argument("--grid-min", type=float, default=0.5, help="smallest clipping factor")
    p.add_argument("--grid-step", type=float, default=0.01, help="clipping grid step")
    p.add_argument("--grid-s-points", type=int, default=100, help="step-size grid points (static)")


def _arch(p):
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--intermediate", type=int, default=512)
    p.add_argument("--max-seq", type=int, default=512)


def _train(p):
    p.add_argument("--epochs", type=int, default=None, help="default: 10 for 8-bit activations, else 20")
    p.add_argument("--lr-q", type=float, default=5e-5, help="learning rate for quantization parameters")
    p.add_argument("--lr-w", type=float, default=5e-6, help="learning rate for weights")
    p.add_argument("--batch", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefixquant", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a random (or planted-outlier) toy model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--planted", action="store_true", help="plant controllable outlier tokens")
    _arch(p)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-corpus", help="write the seeded toy byte corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bytes", type=int, default=1 << 18)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("analyze", help="token-wise outlier statistics")
    _common(p)
    _thresholds(p)
    p.add_argument("--prefix", help="prefix cache to analyze with")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write per-token maxima as CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("find-prefix", help="select prefixed tokens and build their KV cache")
    _common(p)
    _thresholds(p)
    p.add_argument("--o", type=int, default=None, help="override the number of prefixed tokens")
    p.add_argument("--prefix-order", choices=ORDERS, default="listed")
    p.add_argument("--out", required=True, help="prefix cache file")
    p.add_argument("--report", help="JSON isolation report")
    p.set_defaults(func=cmd_find_prefix)

    p = sub.add_parser("rotate", help="apply Hadamard rotations R1-R4")
    _common(p, corpus=False)
    p.add_argument("--sites", default=",".join(SITES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("calibrate", help="grid-search initialization of quantization parameters")
    _common(p)
    _grid(p)
    p.add_argument("--scheme", choices=SCHEMES, default="O2")
    p.add_argument("--bits", default="4,4,4", help="W,A,KV bit widths")
    p.add_argument("--prefix", help="prefix cache")
    p.add_argument("--timing", action="store_true", help="record wall time per site in the report")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("finetune", help="block-wise fine-tuning")
    _common(p, samples=(64, 256))
    _train(p)
    p.add_argument("--prefix", help="prefix cache")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="perplexity of a (quantized) model")
    _common(p, corpus=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--n-bytes", type=int, default=0)
    p.add_argument("--context-len", type=int, default=256)
    p.add_argument("--prefix", help="prefix cache")
    p.add_argument("--fp", action="store_true", help="ignore quantization hooks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("error-table", help="outlier-token error decomposition")
    _common(p, samples=(4, 128))
    _thresholds(p)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--act-bits", type=int, default=4)
    p.add_argument("--prefix-order", choices=ORDERS, default="listed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_error_table)

    p = sub.add_parser("pipeline", help="rotate, analyze, prefix, calibrate, finetune, eval")
    p.add_argument("--model", help="start from this model instead of a generated one")
    p.add_argument("--corpus", help="use this corpus instead of the generated one")
    p.add_argument("--random-model", action="store_true", help="generate a random model, not a planted one")
    p.add_argument("--scheme", choices=SCHEMES, default="O2")
    p.add_argument("--bits", default="4,4,4", help="W,A,KV bit widths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-rotation", action="store_true")
    p.add_argument("--no-prefix", action="store_true")
    p.add_argument("--n-calib", type=int, default=8)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--prefix-order", choices=ORDERS, default="listed")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    _arch(p)
    _grid(p)
    _train(p)
    _thresholds(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, container.ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
