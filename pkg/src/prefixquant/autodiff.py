"""Minimal reverse-mode gradient tape over the fixed decoder-block graph.

Every op computes its forward value with the same primitives as the inference
path (so a float32 tape reproduces ``run_block`` exactly) and records a closure
that maps the output gradient to gradients of its inputs. Gradients are always
float64.

Quantizer gradients:

* input x          straight-through: 1 where the rounded value lies inside
                   [0, qmax], 0 where it was clamped.
* step size s      exact derivative with the rounding held fixed: ``round(x/s)``
                   inside, ``-z`` below, ``qmax - z`` above.
* zero point z     straight-through through its own rounding: ``-s`` where
                   clamped, 0 inside.
* clipping gamma/beta (dynamic)   chain rule through ``s = (g*max - b*min)/qmax``
                   with the zero point held fixed.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import attention_probs, attention_with_prefix
from .quant import S_GUARD, QuantSpec, group_view, ungroup
from .rotation import HadamardSpec
from .tensor import F32, F64, DimensionError, add, matmul, mul, rmsnorm, rope_apply, rope_inverse, silu


class Var:
    __slots__ = ("value", "grad", "parents", "backward", "name", "requires_grad")

    def __init__(self, value, parents=(), backward=None, name=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward = backward
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Records nodes in creation order, which is a topological order by construction."""

    def __init__(self, dtype=F64):
        if dtype not in (F32, F64):
            raise ValueError("tape dtype must be float32 or float64")
        self.dtype = dtype
        self.nodes: list[Var] = []

    def leaf(self, value, name=None, requires_grad=False) -> Var:
        v = Var(np.asarray(value), name=name, requires_grad=requires_grad)
        self.nodes.append(v)
        return v

    def _node(self, value, parents, backward) -> Var:
        needs = any(p.requires_grad for p in parents)
        v = Var(value, tuple(parents), backward if needs else None, requires_grad=needs)
        self.nodes.append(v)
        return v

    def backward(self, out: Var, grad=None) -> None:
        for n in self.nodes:
            n.grad = None
        out.grad = np.ones_like(out.value, dtype=F64) if grad is None else np.asarray(grad, F64)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward is None:
                continue
            grads = node.backward(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # ------------------------------------------------------------------ dense ops

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        out = matmul(av, bv, self.dtype)

        def back(g):
            a64, b64 = av.astype(F64), bv.astype(F64)
            ga = g @ b64.T if a.requires_grad else None
            gb = a64.reshape(-1, a64.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb

        return self._node(out, (a, b), back)

    def add(self, a: Var, b: Var) -> Var:
        out = add(a.value, b.value, self.dtype)

        def back(g):
            gb = g if b.shape == a.shape else g.reshape(-1, g.shape[-1]).sum(axis=0)
            return g, gb

        return self._node(out, (a, b), back)

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        out = mul(av, bv, self.dtype)

        def back(g):
            a64, b64 = av.astype(F64), bv.astype(F64)
            ga = g * b64
            gb = g * a64
            if b.shape != a.shape:
                gb = gb.reshape(-1, gb.shape[-1]).sum(axis=0)
            return ga, gb

        return self._node(out, (a, b), back)

    def silu(self, x: Var) -> Var:
        xv = x.value
        out = silu(xv, self.dtype)

        def back(g):
            x64 = xv.astype(F64)
            with np.errstate(over="ignore"):
                sig = 1.0 / (1.0 + np.exp(-x64))
            return (g * (sig + x64 * sig * (1.0 - sig)),)

        return self._node(out, (x,), back)

    def rmsnorm(self, x: Var, gain: np.ndarray, eps: float) -> Var:
        xv = x.value
        out = rmsnorm(xv, gain, eps, self.dtype)

        def back(g):
            x64 = xv.astype(F64)
            c = x64.shape[-1]
            r = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
            gg = g * gain.astype(F64)
            dot = np.sum(gg * x64, axis=-1, keepdims=True)
            return (r * gg - x64 * r**3 * dot / c,)

        return self._node(out, (x,), back)

    def reshape(self, x: Var, shape) -> Var:
        src = x.shape
        return self._node(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))

    def rope(self, x: Var, positions: np.ndarray, theta: float) -> Var:
        out = rope_apply(x.value, positions, theta, self.dtype)
        return self._node(out, (x,), lambda g: (rope_inverse(g, positions, theta, F64),))

    def hadamard(self, x: Var, spec: HadamardSpec) -> Var:
        if x.shape[-1] != spec.dim:
            raise DimensionError(f"rotation of width {spec.dim} cannot act on {x.shape}")
        out = spec.apply(x.value, self.dtype)
        return self._node(out, (x,), lambda g: (spec.apply_t(g, F64),))

    def attention(self, q: Var, k: Var, v: Var, kp=None, vp=None) -> Var:
        """Causal attention with a constant prefix; inputs ``[T, H, D]``."""
        qv, kv, vv = q.value, k.value, v.value
        out = attention_with_prefix(qv, kv, vv, kp, vp, self.dtype)
        o = kp.shape[0] if kp is not None else 0

        def back(g):
            d = qv.shape[-1]
            p = attention_probs(qv, kv, kp if o else None)          # [H, T, o+S]
            keys = np.concatenate([kp, kv], 0) if o else kv
            vals = np.concatenate([vp, vv], 0) if o else vv
            g64 = g.astype(F64)
            gv = np.einsum("hts,thd->shd", p, g64)[o:]
            gp = np.einsum("thd,shd->hts", g64, vals.astype(F64))
            gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) / math.sqrt(d)
            gq = np.einsum("hts,shd->thd", gs, keys.astype(F64))
            gk = np.einsum("hts,thd->shd", gs, qv.astype(F64))[o:]
            return gq, gk, gv

        return self._node(out, (q, k, v), back)

    # ------------------------------------------------------------------ quantizers

    def _fq_core(self, grouped, s, z, qmax):
        """Forward of the grouped quantizer and the masks its backward needs."""
        u = np.rint(grouped / s[:, None])
        q = u + z[:, None]
        lo, hi = q < 0, q > qmax
        c = np.clip(q, 0, qmax)
        return s[:, None] * (c - z[:, None]), u, lo, hi

    def _ds_dz(self, g, u, lo, hi, s, z, qmax):
        inside = ~(lo | hi)
        ds = np.where(inside, u, np.where(lo, -z[:, None], qmax - z[:, None]))
        gs = np.sum(g * ds, axis=1)
        gz = np.sum(g * np.where(inside, 0.0, -s[:, None]), axis=1)
        return inside, gs, gz

    def fake_quant(self, x: Var, s: Var, z: Var, spec: QuantSpec, role: str) -> Var:
        """Quantizer with explicit per-group (s, z); z is rounded to an integer in the forward."""
        xv = x.value
        grouped = group_view(xv, spec, role)
        sv = np.asarray(s.value, F64).reshape(-1)
        zr = np.clip(np.rint(np.asarray(z.value, F64).reshape(-1)), 0, spec.qmax)
        if sv.shape[0] != grouped.shape[0]:
            raise DimensionError(f"{sv.shape[0]} step sizes for {grouped.shape[0]} groups")
        outg, u, lo, hi = self._fq_core(grouped, sv, zr, spec.qmax)
        out = ungroup(outg, spec, xv.shape, role).astype(self.dtype)
        sshape, zshape = np.shape(s.value), np.shape(z.value)

        def back(g):
            gg = group_view(g, spec, role)
            inside, gs, gz = self._ds_dz(gg, u, lo, hi, sv, zr, spec.qmax)
            gx = ungroup(gg * inside, spec, xv.shape, role)
            return gx, gs.reshape(sshape), gz.reshape(zshape)

        return self._node(out, (x, s, z), back)

    def dynamic_quant(self, x: Var, gamma: Var, beta: Var, spec: QuantSpec, role: str) -> Var:
        """Quantizer refit on the input with shared clipping factors (gamma, beta)."""
        xv = x.value
        grouped = group_view(xv, spec, role)
        gv, bv = float(np.asarray(gamma.value)), float(np.asarray(beta.value))
        mx, mn = grouped.max(axis=1), grouped.min(axis=1)
        qmax = spec.qmax
        s = (gv * mx - bv * mn) / qmax
        degenerate = (mx == mn) | (s < S_GUARD)
        s = np.where(degenerate, S_GUARD, s)
        if self.dtype == F32:
            s = s.astype(F32).astype(F64)
        z = np.clip(-np.floor(bv * mn / s), 0, qmax)
        outg, u, lo, hi = self._fq_core(grouped, s, z, qmax)
        out = ungroup(outg, spec, xv.shape, role).astype(self.dtype)

        def back(g):
            gg = group_view(g, spec, role)
            inside, gs, _ = self._ds_dz(gg, u, lo, hi, s, z, qmax)
            gs = np.where(degenerate, 0.0, gs)
            ggam = float(np.sum(gs * mx) / qmax)
            gbet = float(np.sum(gs * -mn) / qmax)
            gx = ungroup(gg * inside, spec, xv.shape, role)
            return gx, np.asarray(ggam), np.asarray(gbet)

        return self._node(out, (x, gamma, beta), back)

    def mse(self, x: Var, target: np.ndarray) -> Var:
        xv = x.value
        d = xv.astype(F64) - target.astype(F64)
        out = np.asarray(np.mean(d * d))
        n = d.size
        return self._node(out, (x,), lambda g: (g * 2.0 * d / n,))
