"""Prefixed outlier tokens: selection, full-precision KV prefill, persistence, isolation check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .attention import attention_with_prefix  # noqa: F401  (re-exported)
from .model import BOS, ModelError, ToyModel, forward
from .outlier import OutlierReport, OutlierThresholds, analyze

ORDERS = ("listed", "reversed")


class PrefixError(ValueError):
    pass


@dataclass(frozen=True)
class PrefixPlan:
    """Prefix token ids in stored order; BOS is always the last entry."""

    token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.token_ids or self.token_ids[-1] != BOS:
            raise PrefixError("a prefix plan must end with the BOS token")

    @property
    def o(self) -> int:
        return len(self.token_ids)

    def prefill_order(self, order: str = "listed") -> list[int]:
        if order not in ORDERS:
            raise PrefixError(f"unknown prefill order {order!r}")
        ids = list(self.token_ids)
        return ids if order == "listed" else ids[::-1]

    def to_json(self) -> dict:
        return {"token_ids": list(self.token_ids), "o": self.o}


def select_prefix(report, o: int, bos: int = BOS) -> PrefixPlan:
    """Top ``o - 1`` non-initial outlier tokens by frequency (ties: smaller id), then BOS."""
    if o < 1:
        raise PrefixError(f"o must be at least 1, got {o}")
    tally = report.tally if isinstance(report, OutlierReport) else dict(report)
    ranked = sorted((tok for tok in tally if tok != bos), key=lambda t: (-tally[t], t))
    return PrefixPlan(tuple(ranked[: o - 1]) + (bos,))


@dataclass
class PrefixCache:
    keys: list[np.ndarray]
    values: list[np.ndarray]
    plan: PrefixPlan
    fingerprint: str
    order: str = "listed"

    @property
    def length(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    def save(self, path) -> None:
        tensors = {}
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            tensors[f"prefix/{i}/k"] = k
            tensors[f"prefix/{i}/v"] = v
        meta = {
            "kind": "prefix",
            "plan": list(self.plan.token_ids),
            "o": self.plan.o,
            "order": self.order,
            "fingerprint": self.fingerprint,
            "shapes": [list(k.shape) for k in self.keys],
        }
        container.write(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "PrefixCache":
        tensors, meta = container.read(path)
        if meta.get("kind") != "prefix":
            raise container.LayoutError(f"{path} is not a prefix cache")
        n = len(meta["shapes"])
        try:
            keys = [tensors[f"prefix/{i}/k"] for i in range(n)]
            values = [tensors[f"prefix/{i}/v"] for i in range(n)]
        except KeyError as exc:
            raise container.LayoutError(f"missing prefix tensor {exc}") from exc
        return cls(keys, values, PrefixPlan(tuple(meta["plan"])), meta["fingerprint"], meta["order"])


def build_prefix_cache(model: ToyModel, plan: PrefixPlan, order: str = "listed") -> PrefixCache:
    """One full-precision prefill over the plan; the resulting keys/values are never quantized."""
    ids = plan.prefill_order(order)
    if len(ids) > model.config.max_seq:
        raise ModelError(f"prefix of {len(ids)} tokens exceeds max_seq {model.config.max_seq}")
    res = forward(model, ids)
    return PrefixCache([k.copy() for k in res.cache.keys], [v.copy() for v in res.cache.values],
                       plan, model.fingerprint(), order)


def verify_isolation(model: ToyModel, plan_or_cache, sequences,
                     th: OutlierThresholds = OutlierThresholds()) -> dict:
    """Outlier statistics on the non-prefix positions with and without the prefix."""
    cache = plan_or_cache
    if isinstance(plan_or_cache, PrefixPlan):
        cache = build_prefix_cache(model, plan_or_cache)
    sites = ("block_out", "down_in", "Q", "K")
    base = analyze(model, sequences, th, sites=sites)
    iso = analyze(model, sequences, th, sites=sites, prefix=cache)
    return {
        "plan": list(cache.plan.token_ids),
        "residual_upper": iso.upper_total(),
        "baseline_upper": base.upper_total(),
        "without_prefix": base.to_json(),
        "with_prefix": iso.to_json(),
    }
