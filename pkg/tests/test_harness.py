import json

import jsonschema
import numpy as np
import pytest

from prefixquant.corpus import make_sequences
from prefixquant.harness import (
    HarnessError, PipelineConfig, config_hash, error_decomposition, error_table, eval_report,
    load_schema, parse_bits, run_pipeline, scheme_hooks, stamp, windows,
)
from prefixquant.model import LINEARS, ModelConfig, load_model_and_hooks
from prefixquant.planted import planted_model
from prefixquant.prefix import PrefixCache

TINY = ModelConfig(n_layers=2, hidden=32, n_heads=2, head_dim=16, intermediate=64, max_seq=96).to_dict()
SCHEMA_OF = {"analysis": "analysis", "prefix": "prefix", "calibration": "calibration",
             "finetune": "finetune", "eval": "pipeline_eval", "error_table": "error_table",
             "pipeline": "pipeline"}


def test_parse_bits():
    assert parse_bits("4,8,16") == (4, 8, 16)
    for bad in ("4,4", "a,b,c", "4,4,4,4"):
        with pytest.raises(HarnessError):
            parse_bits(bad)


def test_scheme_table():
    o1, o2, w3 = scheme_hooks("O1", (4, 8, 4)), scheme_hooks("O2"), scheme_hooks("W3")
    assert o1.specs["weight.q_proj"].granularity == "per_channel"
    assert o1.specs["input.up_proj"] == o1.specs["input.up_proj"].__class__(8, "per_token")
    assert o1.specs["K"].granularity == "group" and o1.specs["K"].group_size == 128
    assert {s.mode for k, s in o2.specs.items() if not k.startswith("weight.")} == {"static"}
    assert o2.specs["V"].granularity == "per_head" and o2.specs["input.q_proj"].granularity == "per_tensor"
    assert set(w3.specs) == {f"weight.{n}" for n in LINEARS}
    assert all(s.bits == 3 and s.granularity == "group" for s in w3.specs.values())
    with pytest.raises(HarnessError):
        scheme_hooks("O3")


def test_stamp_and_windows():
    s = stamp({"a": 1}, 3, {"x": 1})
    assert s["seed"] == 3 and s["config_hash"] == config_hash({"x": 1}) != config_hash({"x": 2})
    assert windows(b"abcdefghi", 2, 3, 1) == [list(b"def"), list(b"ghi")]
    with pytest.raises(HarnessError):
        windows(b"abc", 2, 3)


def test_error_decomposition_on_random_and_planted_models(small_model):
    seqs = make_sequences(2, 48, 0)
    rand = error_decomposition(small_model, seqs)
    assert rand["n_outlier_tokens"] == 0 and rand["outlier_share"] == 0.0
    assert rand["outlier_share"] + rand["remaining_share"] == pytest.approx(100.0)
    cfg = ModelConfig(n_layers=3, hidden=64, n_heads=2, head_dim=32, intermediate=128, max_seq=128)
    table = error_table(planted_model(cfg, 0), make_sequences(4, 64, 0), seed=0, layer=1, bits=4)
    rows = table["rows"]
    assert rows["none"]["mse"] > rows["rotation"]["mse"] > rows["rotation+prefix"]["mse"]
    assert rows["none"]["outlier_share"] > 50
    assert rows["rotation+prefix"]["n_outlier_tokens"] == 0
    with pytest.raises(HarnessError):
        error_decomposition(small_model, seqs, layer=5)


def test_eval_report(small_model):
    toks = list(make_sequences(1, 200, 0)[0])
    a = eval_report(small_model, toks, context_len=64)
    assert a == eval_report(small_model, toks, context_len=64)
    assert a["nll"] == pytest.approx(np.log(a["perplexity"]))
    with pytest.raises(HarnessError):
        eval_report(small_model, toks[:10], context_len=64)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    cfg = PipelineConfig(scheme="O1", model=TINY, n_calib=2, n_train=4, n_eval=2, seq_len=32,
                         grid_step=0.1, s_points=5, epochs=2, seed=3)
    summary = run_pipeline(cfg, out)
    return out, summary


def test_pipeline_outputs_validate(pipeline_dir):
    out, summary = pipeline_dir
    for name, schema in SCHEMA_OF.items():
        report = json.loads((out / f"{name}.json").read_text())
        jsonschema.validate(report, load_schema(schema))
        assert report["seed"] == 3
    assert summary["plan"][-1] == 256
    model, hooks = load_model_and_hooks(out / "model_quant.pqt")
    assert model.fingerprint() == summary["model_fingerprint"]
    assert hooks and set(hooks.specs) == set(scheme_hooks("O1").specs)
    cache = PrefixCache.load(out / "prefix.pqt")
    assert list(cache.plan.token_ids) == summary["plan"]
    assert (out / "maxima.csv").read_text().startswith("site,layer")
