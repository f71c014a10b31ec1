"""Deterministic toy byte corpus: pseudo-English sentences built from a fixed syllable set."""

from __future__ import annotations

import numpy as np

from .tensor import make_rng

_SYLLABLES = (
    "ka", "lo", "mi", "ne", "ru", "ta", "sho", "ven", "dar", "qui", "el", "an", "or",
    "is", "tem", "pra", "gu", "fel", "zo", "bri", "the", "of", "and", "to", "in",
)


def _word(rng: np.random.Generator) -> str:
    n = int(rng.integers(1, 4))
    return "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n))


def generate_text(n_bytes: int, seed: int) -> bytes:
    """At least ``n_bytes`` of text with '.', ',' and newlines as delimiters, truncated to length."""
    rng = make_rng(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        words = [_word(rng) for _ in range(int(rng.integers(3, 12)))]
        if rng.random() < 0.3:
            words[int(rng.integers(0, len(words)))] += ","
        sent = " ".join(words).capitalize() + "."
        sent += "\n" if rng.random() < 0.2 else " "
        parts.append(sent)
        size += len(sent)
    return "".join(parts).encode("ascii")[:n_bytes]


def make_sequences(n_samples: int, seq_len: int, seed: int, offset: int = 0) -> list[list[int]]:
    """``n_samples`` consecutive byte windows of ``seq_len`` from a seeded corpus."""
    text = generate_text((offset + n_samples) * seq_len, seed)
    return [list(text[(offset + i) * seq_len:(offset + i + 1) * seq_len]) for i in range(n_samples)]
