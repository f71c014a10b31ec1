"""Token-wise outlier statistics over captured activations."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .model import BOS, QuantHookSet, ToyModel, forward
from .tensor import F64, median

MEDIAN_GUARD = 1e-12
DEFAULT_SITES = ("block_out", "down_in", "Q", "K")


@dataclass(frozen=True)
class OutlierThresholds:
    eta1: float = 64.0
    eta2: float = 8.0

    def __post_init__(self):
        if not (self.eta1 > 1 and self.eta2 > 1):
            raise ValueError("outlier thresholds must exceed 1")


def token_maxima(x: np.ndarray) -> np.ndarray:
    """Largest |value| of each token; extra trailing axes (heads) are flattened."""
    x = np.abs(np.asarray(x))
    return x.reshape(x.shape[0], -1).max(axis=1)


def ratios(m: np.ndarray) -> np.ndarray:
    med = max(median(m), MEDIAN_GUARD)
    return np.asarray(m, dtype=F64) / med


def classify_outliers(m: np.ndarray, th: OutlierThresholds = OutlierThresholds()):
    """Return ``(upper, lower, R)``: upper = {i: R_i > eta1}, lower = {i: 1/R_i > eta2}."""
    r = ratios(m)
    with np.errstate(divide="ignore", over="ignore"):
        inv = 1.0 / r
    upper = [int(i) for i in np.flatnonzero(r > th.eta1)]
    lower = [int(i) for i in np.flatnonzero(inv > th.eta2)]
    return upper, lower, r


def with_context(ids, prefix) -> list[int]:
    """Model input for a raw byte sequence: BOS-led unless a prefix cache supplies the BOS."""
    ids = list(ids)
    return ids if prefix is not None else [BOS] + ids


@dataclass
class OutlierReport:
    """Token maxima per (site, layer, sequence) plus every aggregate derived from them."""

    thresholds: OutlierThresholds
    sequences: list[list[int]]
    maxima: dict[str, list[list[np.ndarray]]]
    prefixed: bool = False
    counts: list[float] = field(default_factory=list)
    o: int = 0
    top1_over_median: dict[str, float] = field(default_factory=dict)
    median_over_min1: dict[str, float] = field(default_factory=dict)
    tally: dict[int, int] = field(default_factory=dict)

    def recompute(self) -> "OutlierReport":
        th = self.thresholds
        self.counts = []
        if "block_out" in self.maxima:
            for per_seq in self.maxima["block_out"]:
                n = [len(classify_outliers(m, th)[0]) for m in per_seq]
                self.counts.append(float(np.mean(n)))
        self.o = int(math.ceil(max(self.counts))) if self.counts else 0
        for site, layers in self.maxima.items():
            top, low = 0.0, 0.0
            for per_seq in layers:
                for m in per_seq:
                    r = ratios(m)
                    top = max(top, float(r.max()))
                    low = max(low, float(1.0 / max(r.min(), MEDIAN_GUARD)))
            self.top1_over_median[site] = top
            self.median_over_min1[site] = low
        tally: Counter = Counter()
        for seq, positions in zip(self.sequences, self.outlier_positions()):
            for pos in positions:
                tally[seq[pos]] += 1
        self.tally = dict(sorted(tally.items()))
        return self

    def outlier_positions(self, site: str = "block_out") -> list[list[int]]:
        """Per sequence: upper-outlier positions at any layer (the initial token skipped unless prefixed)."""
        layers = self.maxima.get(site, [])
        out = []
        for si in range(len(self.sequences)):
            found = set()
            for per_seq in layers:
                found.update(classify_outliers(per_seq[si], self.thresholds)[0])
            if not self.prefixed:
                found.discard(0)
            out.append(sorted(found))
        return out

    def upper_total(self, site: str = "block_out") -> int:
        return sum(len(p) for p in self.outlier_positions(site))

    def to_json(self) -> dict:
        return {
            "eta1": self.thresholds.eta1,
            "eta2": self.thresholds.eta2,
            "prefixed": self.prefixed,
            "n_sequences": len(self.sequences),
            "outlier_counts": self.counts,
            "o": self.o,
            "max_top1_over_median": self.top1_over_median,
            "max_median_over_min1": self.median_over_min1,
            "frequency_tally": {str(k): v for k, v in self.tally.items()},
        }

    def maxima_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "layer", "sequence", "position", "token", "max_abs"])
        for site, layers in sorted(self.maxima.items()):
            for li, per_seq in enumerate(layers):
                for si, m in enumerate(per_seq):
                    for pos, val in enumerate(m):
                        w.writerow([site, li, si, pos, self.sequences[si][pos], repr(float(val))])
        return buf.getvalue()


def analyze(model: ToyModel, sequences, th: OutlierThresholds = OutlierThresholds(),
            sites=DEFAULT_SITES, prefix=None, hooks: QuantHookSet | None = None) -> OutlierReport:
    """Full-precision forward over every sequence and collect token maxima at ``sites``."""
    sequences = [list(s) for s in sequences]
    if not sequences:
        raise ValueError("outlier analysis needs at least one calibration sequence")
    n_layers = model.config.n_layers
    maxima = {s: [[] for _ in range(n_layers)] for s in sites}
    inputs = []
    for seq in sequences:
        ids = with_context(seq, prefix)
        inputs.append(ids)
        res = forward(model, ids, hooks, prefix=prefix, capture=sites)
        for (layer, site), x in res.acts.items():
            maxima[site][layer].append(token_maxima(x))
    return OutlierReport(th, inputs, maxima, prefixed=prefix is not None).recompute()


def count_outlier_tokens(model: ToyModel, sequences, th: OutlierThresholds = OutlierThresholds()):
    """Per-block mean upper-outlier count O and o = ceil(max O)."""
    rep = analyze(model, sequences, th, sites=("block_out",))
    return rep.counts, rep.o


def frequency_tally(model: ToyModel, sequences, th: OutlierThresholds = OutlierThresholds()) -> dict[int, int]:
    return analyze(model, sequences, th, sites=("block_out",)).tally
