"""How varied the generated captions are, pooled over the whole output set."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence


def entropy(frequencies: Iterable[int]) -> float:
    """Base-2 Shannon entropy of a frequency table."""
    counts = [f for f in frequencies if f > 0]
    total = sum(counts)
    if total == 0:
        return 0.0
    h = -sum((f / total) * math.log2(f / total) for f in counts)
    return max(h, 0.0)


def ngram_counts(captions: Sequence[Sequence[str]], n: int) -> Counter:
    out: Counter = Counter()
    for cap in captions:
        out.update(tuple(cap[i:i + n]) for i in range(len(cap) - n + 1))
    return out


def diversity_report(generated: Sequence[Sequence[str]], training: Sequence[Sequence[str]],
                     vocabulary_words: Sequence[str]) -> dict[str, float]:
    """Vocabulary usage %, unigram/bigram entropy and % of captions copied from training.

    ``vocabulary_words`` is the known vocabulary without special tokens.
    """
    if not generated:
        raise ValueError("no generated captions")
    known = set(vocabulary_words)
    if not known:
        raise ValueError("empty vocabulary")
    used = {tok for cap in generated for tok in cap} & known
    seen = {tuple(c) for c in training}
    existing = sum(tuple(c) in seen for c in generated)
    return {
        "vocab_used_pct": 100.0 * len(used) / len(known),
        "unigram_entropy": entropy(ngram_counts(generated, 1).values()),
        "bigram_entropy": entropy(ngram_counts(generated, 2).values()),
        "existing_pct": 100.0 * existing / len(generated),
    }
