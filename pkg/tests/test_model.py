import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL
from oracles import naive_forward
from prefixquant.model import (
    BOS, KvCache, ModelConfig, ModelError, QuantHookSet, SequenceOverflowError, UnknownSiteError,
    detokenize, forward, init_random_model, perplexity, tokenize,
)
from prefixquant.prefix import PrefixCache, PrefixPlan
from prefixquant.quant import QuantSpec
from prefixquant.tensor import make_rng


def hooks16():
    specs = {f"weight.{n}": QuantSpec(16, "per_channel") for n in ("q_proj", "k_proj", "v_proj", "o_proj",
                                                                   "gate_proj", "up_proj", "down_proj")}
    specs.update({f"input.{n}": QuantSpec(16, "per_token") for n in ("q_proj", "o_proj", "down_proj")})
    specs.update({s: QuantSpec(16, "per_head") for s in ("K", "V")})
    return QuantHookSet(specs)


def test_config_invariants():
    with pytest.raises(ModelError):
        ModelConfig(hidden=256, n_heads=3, head_dim=64)
    with pytest.raises(ModelError):
        ModelConfig(hidden=96, n_heads=3, head_dim=32)
    with pytest.raises(ModelError):
        ModelConfig(intermediate=500)
    with pytest.raises(ModelError):
        ModelConfig(vocab=300)


def test_init_is_deterministic_with_expected_scale():
    a = init_random_model(ModelConfig(), make_rng(0))
    b = init_random_model(ModelConfig(), make_rng(0))
    c = init_random_model(ModelConfig(), make_rng(1))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    assert abs(a.embedding.std() - 0.02) < 0.002
    assert abs(a.layers[0]["q_proj"].std() - 0.02) < 0.002
    assert abs(a.layers[0]["o_proj"].std() - 0.02 / np.sqrt(8)) < 0.001


def test_forward_matches_naive_oracle(small_model):
    tokens = [BOS] + list(b"hello, world")
    got = forward(small_model, tokens).logits
    ref = naive_forward(small_model, tokens)
    assert np.allclose(got, ref, rtol=1e-4, atol=1e-5)


def test_prefix_forward_matches_naive_oracle(small_model):
    from prefixquant.prefix import build_prefix_cache
    cache = build_prefix_cache(small_model, PrefixPlan((46, BOS)))
    tokens = list(b"abc. def")
    got = forward(small_model, tokens, prefix=cache).logits
    assert np.allclose(got, naive_forward(small_model, tokens, (46, BOS)), rtol=1e-4, atol=1e-5)


def test_causality(small_model):
    rng = make_rng(3)
    a = [BOS] + rng.integers(0, 256, 30).tolist()
    b = a[:20] + rng.integers(0, 256, 11).tolist()
    la, lb = forward(small_model, a).logits, forward(small_model, b).logits
    assert np.array_equal(la[:20], lb[:20])


def test_incremental_cache_equals_full_forward(small_model):
    tokens = [BOS] + list(b"incremental decoding")
    full = forward(small_model, tokens).logits
    res = forward(small_model, tokens[:5])
    steps = [res.logits]
    cache = res.cache
    for t in tokens[5:]:
        res = forward(small_model, [t], cache=cache)
        cache = res.cache
        steps.append(res.logits)
    assert np.allclose(np.concatenate(steps), full, atol=1e-5)


def test_empty_prefix_is_identity(small_model):
    cfg = small_model.config
    empty = KvCache.empty(cfg)
    cache = PrefixCache(empty.keys, empty.values, PrefixPlan((BOS,)), small_model.fingerprint())
    tokens = [BOS] + list(b"xyz")
    assert np.array_equal(forward(small_model, tokens, prefix=cache).logits, forward(small_model, tokens).logits)


def test_sixteen_bit_hooks_are_transparent(small_model):
    tokens = [BOS] + list(b"sixteen bit hooks")
    fp = forward(small_model, tokens).logits
    q = forward(small_model, tokens, hooks16()).logits
    assert np.max(np.abs(fp - q)) < 1e-3


def test_errors(small_model):
    with pytest.raises(SequenceOverflowError):
        forward(small_model, [1] * (SMALL.max_seq + 1))
    with pytest.raises(ModelError):
        forward(small_model, [300])
    with pytest.raises(ModelError):
        forward(small_model, [])
    with pytest.raises(UnknownSiteError):
        forward(small_model, [1], capture=["nowhere"])
    with pytest.raises(UnknownSiteError):
        QuantHookSet({"input.lm_head": QuantSpec(4)})
    static = QuantHookSet({"input.q_proj": QuantSpec(4, "per_tensor", "static")})
    with pytest.raises(ModelError, match="no calibrated"):
        forward(small_model, [1, 2], static)
    other = init_random_model(SMALL, make_rng(9))
    from prefixquant.prefix import build_prefix_cache
    with pytest.raises(ModelError, match="different model"):
        forward(small_model, [1], prefix=build_prefix_cache(other, PrefixPlan((BOS,))))


@given(st.binary(max_size=64))
def test_tokenize_round_trip(data):
    ids = tokenize(data)
    assert BOS not in ids and all(0 <= i < 256 for i in ids)
    assert detokenize(ids) == data


def _zero_blocks(model):
    m = model.copy()
    for layer in m.layers:
        for name in layer:
            if not name.endswith("norm"):
                layer[name][:] = 0
    m.embedding[:] = 0
    m.lm_head[:] = 0
    m._fp = None
    return m


def test_perplexity_uniform_and_copy(small_model):
    corpus = [ord("a")] * 129
    uniform = _zero_blocks(small_model)
    uniform.embedding[:, 0] = 1.0
    assert perplexity(uniform, corpus, context_len=64) == pytest.approx(257, rel=1e-9)
    copy = _zero_blocks(small_model)
    copy.embedding[[ord("a"), BOS], 0] = 1.0
    copy.lm_head[0, ord("a")] = 50.0
    assert perplexity(copy, corpus, context_len=64) < 1.001


def test_perplexity_with_sixteen_bit_hooks(small_model):
    from prefixquant.corpus import generate_text
    tokens = list(generate_text(300, 0))
    fp = perplexity(small_model, tokens, context_len=64)
    q = perplexity(small_model, tokens, hooks16(), context_len=64)
    assert abs(q - fp) / fp < 1e-3
    with pytest.raises(ModelError):
        perplexity(small_model, tokens[:10], context_len=64)
