import numpy as np
import pytest

from conftest import SMALL
from gradcheck import assert_close, check_op, op_cases
from prefixquant.autodiff import Tape
from prefixquant.finetune import BlockState, block_forward_quant
from prefixquant.harness import scheme_hooks
from prefixquant.model import BOS, LINEARS, QuantHookSet, layer_weights, run_block
from prefixquant.quant import QuantSpec, fit_params
from prefixquant.rotation import rotate_model
from prefixquant.tensor import make_rng

LABELS = [c[0] for c in op_cases(make_rng(0))]


@pytest.mark.parametrize("label", LABELS)
def test_op_gradient_matches_finite_differences(label):
    rng = make_rng(LABELS.index(label) + 11)
    _, build, arrays, wrt = next(c for c in op_cases(rng) if c[0] == label)
    assert_close(check_op(build, arrays, wrt, rng, probes=10), min_probes=6)


def _clamped_case(rng):
    x = rng.standard_normal((4, 16)) * 3
    spec = QuantSpec(3, "per_token")
    p = fit_params(x.astype(np.float32), spec, 0.6, 0.6)
    return x, spec, p.s.astype(np.float64), p.z.astype(np.float64)


def test_fake_quant_gradients_follow_their_definitions():
    x, spec, s, z = _clamped_case(make_rng(1))
    tape = Tape(np.float64)
    xv, sv, zv = (tape.leaf(v, requires_grad=True) for v in (x, s, z))
    out = tape.fake_quant(xv, sv, zv, spec, "activation")
    tape.backward(out, np.ones_like(x))
    code = np.rint(x / s[:, None]) + z[:, None]
    inside = (code >= 0) & (code <= spec.qmax)
    assert 0 < inside.sum() < x.size
    assert np.array_equal(xv.grad, inside.astype(float))
    assert np.allclose(sv.grad, (out.value / s[:, None]).sum(axis=1))
    assert np.allclose(zv.grad, -s * (~inside).sum(axis=1))


def test_dynamic_quant_input_gradient_is_straight_through():
    x, spec, s, z = _clamped_case(make_rng(2))
    tape = Tape(np.float64)
    xv = tape.leaf(x, requires_grad=True)
    out = tape.dynamic_quant(xv, tape.leaf(np.asarray(0.6)), tape.leaf(np.asarray(0.6)), spec, "activation")
    tape.backward(out, np.ones_like(x))
    inside = (np.rint(x / s[:, None]) + z[:, None] >= 0) & (np.rint(x / s[:, None]) + z[:, None] <= spec.qmax)
    assert np.array_equal(xv.grad, inside.astype(float))


def test_gradients_accumulate_over_reuse():
    tape = Tape(np.float64)
    a = tape.leaf(np.array([[1.0, -2.0]]), requires_grad=True)
    out = tape.add(tape.mul(a, a), a)
    tape.backward(out, np.ones((1, 2)))
    assert np.array_equal(a.grad, [[3.0, -3.0]])
    with pytest.raises(ValueError):
        Tape(np.int32)


@pytest.fixture(scope="module")
def rotated(small_model):
    return rotate_model(small_model, 2)


def _inputs(model):
    h = model.embedding[[BOS] + list(b"tape versus inference")]
    return h, np.arange(h.shape[0])


@pytest.mark.parametrize("scheme", [None, "O1"])
def test_float32_tape_reproduces_inference(rotated, scheme):
    hooks = (scheme_hooks(scheme) if scheme else QuantHookSet()).only_layers({0})
    h, pos = _inputs(rotated)
    out, _ = block_forward_quant(Tape(np.float32), rotated, 0, h, pos, hooks, BlockState(rotated, 0, hooks))
    ref = run_block(rotated, 0, h, pos, hooks, layer_weights(rotated, 0, hooks))[0]
    assert out.value.dtype == np.float32
    assert np.array_equal(out.value, ref)


def test_sixteen_bit_tape_is_near_lossless(rotated):
    specs = {f"weight.{n}": QuantSpec(16, "per_channel") for n in LINEARS}
    specs.update({f"input.{n}": QuantSpec(16, "per_token") for n in LINEARS})
    hooks = QuantHookSet(specs).only_layers({0})
    h, pos = _inputs(rotated)
    out, _ = block_forward_quant(Tape(np.float64), rotated, 0, h, pos, hooks, BlockState(rotated, 0, hooks))
    fp = run_block(rotated, 0, h, pos, QuantHookSet(), layer_weights(rotated, 0, QuantHookSet()))[0]
    assert np.max(np.abs(out.value - fp)) < 1e-3
    assert SMALL.n_layers == len(rotated.layers)
