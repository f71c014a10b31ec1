"""Central finite-difference checks for the gradient tape."""

from __future__ import annotations

import numpy as np

from prefixquant.autodiff import Tape

REL_TOL = 1e-3
ABS_FLOOR = 1e-9


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), ABS_FLOOR)


def check_op(build, arrays: dict, wrt, rng, eps: float = 1e-6, probes: int = 6):
    """Compare analytic and central-difference gradients of ``mse(build(...), target)``.

    ``build(tape, leaves) -> Var`` records the op under test. Each probe
    perturbs one random entry of one array in ``wrt``. Returns the list of
    (name, index, analytic, numeric) probes; probes whose step straddles a
    discontinuity (the difference quotient changes with the step) are skipped.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    target = None

    def run(arrs, grad=False):
        nonlocal target
        tape = Tape(np.float64)
        leaves = {k: tape.leaf(v, name=k, requires_grad=grad and k in wrt) for k, v in arrs.items()}
        out = build(tape, leaves)
        if target is None:
            target = rng.standard_normal(np.shape(out.value))
        loss = tape.mse(out, target)
        if grad:
            tape.backward(loss)
        return float(loss.value), leaves

    _, leaves = run(arrays, grad=True)
    results = []
    for _ in range(probes):
        name = wrt[int(rng.integers(len(wrt)))]
        idx = tuple(int(rng.integers(n)) for n in arrays[name].shape)
        analytic = float(np.asarray(leaves[name].grad)[idx]) if leaves[name].grad is not None else 0.0

        def quotient(h):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            return (run(plus)[0] - run(minus)[0]) / (2 * h)

        n1, n2 = quotient(eps), quotient(eps / 2)
        if rel_err(n1, n2) > 1e-2:
            continue
        results.append((name, idx, analytic, n1))
    return results


def assert_close(results, min_probes: int = 1):
    assert len(results) >= min_probes, f"only {len(results)} usable probes"
    for name, idx, a, n in results:
        assert rel_err(a, n) < REL_TOL, f"{name}{list(idx)}: analytic {a:.8g} vs numeric {n:.8g}"


def _away_from_boundaries(x, s, margin=1e-3):
    """True when no x/s sits within ``margin`` steps of a rounding tie."""
    frac = np.abs(np.asarray(x) / s - np.floor(np.asarray(x) / s) - 0.5)
    return bool(np.all(frac > margin))


def op_cases(rng):
    """(label, build, arrays, wrt) for every differentiable op on the tape."""
    from prefixquant.quant import QuantSpec
    from prefixquant.rotation import random_hadamard

    t, h, d = 5, 2, 8
    c = h * d
    cases = []
    a, b = rng.standard_normal((t, c)), rng.standard_normal((c, 3))
    cases.append(("matmul", lambda tp, L: tp.matmul(L["a"], L["b"]), {"a": a, "b": b}, ["a", "b"]))
    cases.append(("add", lambda tp, L: tp.add(L["a"], L["b"]),
                  {"a": a, "b": rng.standard_normal((t, c))}, ["a", "b"]))
    cases.append(("add_broadcast", lambda tp, L: tp.add(L["a"], L["b"]),
                  {"a": a, "b": rng.standard_normal(c)}, ["a", "b"]))
    cases.append(("mul", lambda tp, L: tp.mul(L["a"], L["b"]),
                  {"a": a, "b": rng.standard_normal((t, c))}, ["a", "b"]))
    cases.append(("mul_broadcast", lambda tp, L: tp.mul(L["a"], L["b"]),
                  {"a": a, "b": rng.standard_normal(c)}, ["a", "b"]))
    cases.append(("silu", lambda tp, L: tp.silu(L["a"]), {"a": 3 * a}, ["a"]))
    gain = rng.standard_normal(c)
    cases.append(("rmsnorm", lambda tp, L: tp.rmsnorm(L["a"], gain, 1e-5), {"a": a}, ["a"]))
    cases.append(("reshape", lambda tp, L: tp.reshape(L["a"], (t, h, d)), {"a": a}, ["a"]))
    pos = np.arange(3, 3 + t)
    cases.append(("rope", lambda tp, L: tp.rope(L["q"], pos, 100.0),
                  {"q": rng.standard_normal((t, h, d))}, ["q"]))
    r = random_hadamard(d, "R3", rng)
    cases.append(("hadamard", lambda tp, L: tp.hadamard(L["q"], r),
                  {"q": rng.standard_normal((t, h, d))}, ["q"]))
    qkv = {k: rng.standard_normal((t, h, d)) for k in "qkv"}
    cases.append(("attention", lambda tp, L: tp.attention(L["q"], L["k"], L["v"]), qkv, list("qkv")))
    kp, vp = rng.standard_normal((2, h, d)), rng.standard_normal((2, h, d))
    cases.append(("attention_prefix", lambda tp, L: tp.attention(L["q"], L["k"], L["v"], kp, vp),
                  qkv, list("qkv")))
    cases.append(("square", lambda tp, L: tp.mul(L["a"], L["a"]), {"a": a}, ["a"]))

    # quantizers: only the step size and clipping factors have a classical derivative
    spec = QuantSpec(4, "per_token")
    while True:
        x = rng.standard_normal((t, c))
        s = (x.max(axis=1) - x.min(axis=1)) / 15 * 0.8
        if _away_from_boundaries(x, s[:, None]):
            break
    z = np.clip(-np.floor(x.min(axis=1) / s), 0, 15)
    cases.append(("fake_quant_s", lambda tp, L: tp.fake_quant(L["x"], L["s"], L["z"], spec, "activation"),
                  {"x": x, "s": s, "z": z}, ["s"]))
    for name in ("gamma", "beta"):
        cases.append((f"dynamic_quant_{name}",
                      lambda tp, L: tp.dynamic_quant(L["x"], L["gamma"], L["beta"], spec, "activation"),
                      {"x": x, "gamma": np.asarray(0.83), "beta": np.asarray(0.91)}, [name]))
    return cases
