"""Independent reference implementations used as test oracles.

They deliberately avoid the package's vectorized helpers: grouping is done by
explicit index enumeration and arithmetic with Python floats.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

F32 = np.float32


# --------------------------------------------------------------------------- quantizer

def group_key(index: tuple, shape: tuple, granularity: str, role: str, group_size: int):
    """Group identifier of one element, from its multi-index alone."""
    if granularity == "per_tensor":
        return 0
    if role == "weight":
        i, j = index
        if granularity == "per_channel":
            return j
        g = min(group_size, shape[0])
        return (j, i // g)
    if role == "activation":
        return index[:-1]
    t, h, d = index
    if granularity == "per_token":
        return t
    if granularity == "per_channel":
        return (h, d)
    if granularity == "per_head":
        return h
    g = min(group_size, shape[-1])
    return (t, h, d // g)


def scalar_params(values: list[float], bits: int, gamma: float, beta: float):
    qmax = 2**bits - 1
    mx, mn = max(values), min(values)
    s = (gamma * mx - beta * mn) / qmax
    if mx == mn or s < 1e-8:
        s = 1e-8
    s = float(F32(s))
    z = -math.floor(beta * mn / s)
    z = min(max(z, 0), qmax)
    return s, float(z)


def scalar_fake_quant(v: float, s: float, z: float, bits: int) -> float:
    qmax = 2**bits - 1
    q = round(v / s) + z          # Python round is half-to-even
    q = min(max(q, 0), qmax)
    return float(F32(s * (q - z)))


def reference_quantize(x: np.ndarray, bits: int, granularity: str, role: str,
                       group_size: int = 128, gamma: float = 1.0, beta: float = 1.0) -> np.ndarray:
    groups: dict = {}
    for idx in itertools.product(*(range(n) for n in x.shape)):
        groups.setdefault(group_key(idx, x.shape, granularity, role, group_size), []).append(idx)
    out = np.empty(x.shape, dtype=F32)
    for members in groups.values():
        vals = [float(x[i]) for i in members]
        s, z = scalar_params(vals, bits, gamma, beta)
        for i, v in zip(members, vals):
            out[i] = scalar_fake_quant(v, s, z, bits)
    return out


# --------------------------------------------------------------------------- outliers and prefix

def brute_classify(m, eta1: float, eta2: float):
    vals = [float(v) for v in m]
    srt = sorted(vals)
    med = srt[(len(srt) - 1) // 2]
    if med < 1e-12:
        med = 1e-12
    r = [v / med for v in vals]
    upper = [i for i in range(len(r)) if r[i] > eta1]
    lower = [i for i in range(len(r)) if r[i] == 0 or 1.0 / r[i] > eta2]
    return upper, lower, r


def brute_select(tally: dict, o: int, bos: int):
    """Repeated linear scans for the most frequent remaining id (smaller id on ties)."""
    left = {k: v for k, v in tally.items() if k != bos}
    picked = []
    while len(picked) < o - 1 and left:
        best = None
        for tok in left:
            if best is None or left[tok] > left[best] or (left[tok] == left[best] and tok < best):
                best = tok
        picked.append(best)
        del left[best]
    return picked + [bos]


# --------------------------------------------------------------------------- transformer

def naive_forward(model, tokens, prefix_tokens=()):
    """Float64 decoder written with explicit loops over heads and positions."""
    cfg = model.config
    ids = list(prefix_tokens) + list(tokens)
    d, nh = cfg.head_dim, cfg.n_heads
    h = model.embedding.astype(np.float64)[ids]

    def norm(x, g):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + cfg.norm_eps) * g.astype(np.float64)

    def rope(x):
        out = np.empty_like(x)
        half = d // 2
        for p in range(x.shape[0]):
            for j in range(half):
                ang = p * cfg.rope_theta ** (-2.0 * j / d)
                c, s = math.cos(ang), math.sin(ang)
                a, b = x[p, j], x[p, j + half]
                out[p, j] = a * c - b * s
                out[p, j + half] = b * c + a * s
        return out

    for layer in model.layers:
        w = {k: v.astype(np.float64) for k, v in layer.items()}
        x = norm(h, w["input_norm"])
        q, k, v = x @ w["q_proj"], x @ w["k_proj"], x @ w["v_proj"]
        att = np.zeros_like(q)
        for hd in range(nh):
            sl = slice(hd * d, (hd + 1) * d)
            qh, kh = rope(q[:, sl]), rope(k[:, sl])
            for t in range(len(ids)):
                sc = np.array([qh[t] @ kh[j] / math.sqrt(d) for j in range(t + 1)])
                p = np.exp(sc - sc.max())
                p /= p.sum()
                att[t, sl] = p @ v[: t + 1, sl]
        h = h + att @ w["o_proj"]
        x = norm(h, w["post_norm"])
        g = x @ w["gate_proj"]
        h = h + (g / (1 + np.exp(-g)) * (x @ w["up_proj"])) @ w["down_proj"]
    logits = norm(h, model.final_norm) @ model.lm_head.astype(np.float64)
    return logits[len(prefix_tokens):]
