import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_classify
from prefixquant.corpus import make_sequences
from prefixquant.model import BOS, ModelConfig
from prefixquant.outlier import (
    OutlierThresholds, analyze, classify_outliers, count_outlier_tokens, frequency_tally, ratios,
    token_maxima,
)
from prefixquant.planted import TRIGGER, planted_model
from prefixquant.tensor import make_rng

PLANTED_CFG = ModelConfig(n_layers=3, hidden=64, n_heads=2, head_dim=32, intermediate=128, max_seq=128)


@pytest.fixture(scope="module")
def planted():
    return planted_model(PLANTED_CFG, 0)


def test_token_maxima():
    assert np.array_equal(token_maxima(np.eye(4)), np.ones(4))
    x = make_rng(0).standard_normal((5, 2, 3))
    assert np.array_equal(token_maxima(x), [np.abs(r).max() for r in x])


def test_classify_examples():
    up, low, r = classify_outliers(np.array([100.0, 1, 1, 1, 1]))
    assert up == [0] and low == [] and r[0] == 100
    assert classify_outliers(np.full(6, 2.5))[:2] == ([], [])
    up, low, _ = classify_outliers(np.array([1.0, 1, 1, 0.05]))
    assert up == [] and low == [3]
    with pytest.raises(ValueError):
        OutlierThresholds(1.0, 8.0)


positive = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e6))


@given(positive)
def test_classification_matches_brute_force(m):
    up, low, r = classify_outliers(m)
    bu, bl, br = brute_classify(m, 64.0, 8.0)
    assert (up, low) == (bu, bl)
    assert np.allclose(r, br)


@given(positive, st.floats(1e-3, 1e3))
def test_scale_invariance(m, c):
    if np.median(m) < 1e-6:
        return
    a = classify_outliers(m)[:2]
    b = classify_outliers(m * c)[:2]
    r = ratios(m)
    # a scaled ratio can only flip class when it sits on a threshold up to rounding
    near = np.any(np.isclose(r, 64.0, rtol=1e-9)) or np.any(np.isclose(1 / np.maximum(r, 1e-300), 8.0, rtol=1e-9))
    assert a == b or near


def test_random_model_has_no_outliers(small_model):
    seqs = make_sequences(3, 32, 0)
    counts, o = count_outlier_tokens(small_model, seqs)
    assert o == int(np.ceil(max(counts)))
    assert frequency_tally(small_model, seqs) == {}
    rep = analyze(small_model, [[65]])
    assert rep.counts == [0.0] * small_model.config.n_layers


def test_planted_trigger_is_the_only_outlier(planted):
    seqs = make_sequences(4, 64, 0)
    assert all(TRIGGER in s for s in seqs)
    rep = analyze(planted, seqs)
    assert rep.tally == {TRIGGER: 4}
    assert rep.upper_total() == sum(rep.tally.values())
    no_bos = planted_model(PLANTED_CFG, 0, fire_bos=False)
    assert count_outlier_tokens(no_bos, seqs)[1] == 1


def test_report_recompute_and_serialization(planted):
    seqs = make_sequences(3, 48, 1)
    rep = analyze(planted, seqs)
    before = json.dumps(rep.to_json(), sort_keys=True)
    rep.counts, rep.tally, rep.o = [], {}, -1
    assert json.dumps(rep.recompute().to_json(), sort_keys=True) == before
    for site, layers in rep.maxima.items():
        top = max(float(ratios(m).max()) for per in layers for m in per)
        assert rep.top1_over_median[site] == pytest.approx(top)
    lines = rep.maxima_csv().splitlines()
    assert lines[0] == "site,layer,sequence,position,token,max_abs"
    assert len(lines) == 1 + 4 * PLANTED_CFG.n_layers * 3 * 49
    assert rep.sequences[0][0] == BOS
