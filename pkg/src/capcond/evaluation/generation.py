"""Corpus-level caption overlap metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

Candidates are token lists (one per image) and references are lists of token
lists.  The conventions follow the MSCOCO caption evaluation toolkit.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from typing import Sequence

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, reference_sets):
    if not candidates:
        raise ValueError("no candidate captions")
    if len(candidates) != len(reference_sets):
        raise ValueError(f"{len(candidates)} candidates but {len(reference_sets)} reference sets")
    for i, refs in enumerate(reference_sets):
        if not refs:
            raise ValueError(f"image {i} has no references")


def bleu(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]],
         max_n: int = 4) -> float:
    """Corpus BLEU with clipped precisions and the closest-length brevity penalty."""
    _check(candidates, reference_sets)
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        cand_len += len(cand)
        # closest reference length, shorter wins a tie
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = math.exp(min(0.0, 1 - ref_len / cand_len))
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(cand: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    for ref in refs:
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]],
            beta: float = 1.2) -> float:
    _check(candidates, reference_sets)
    scores = [rouge_l_single(c, refs, beta) for c, refs in zip(candidates, reference_sets)]
    return sum(scores) / len(scores)


def length_penalty(delta: float, sigma: float = 6.0) -> float:
    return math.exp(-(delta ** 2) / (2 * sigma ** 2))


def cider_d(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]],
            n: int = 4, sigma: float = 6.0, per_image: bool = False):
    """CIDEr-D with document frequencies taken from the reference sets."""
    _check(candidates, reference_sets)
    n_images = len(reference_sets)
    if n_images < 2:
        warnings.warn("CIDEr-D over a single image: every IDF weight is zero", stacklevel=2)
    df: Counter = Counter()
    for refs in reference_sets:
        seen = set()
        for r in refs:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_n = math.log(float(n_images))

    def vectorize(tokens):
        vecs, norms = [], []
        for k in range(1, n + 1):
            vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in ngrams(tokens, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(x * x for x in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in zip(candidates, reference_sets):
        cv, cn = vectorize(cand)
        acc = [0.0] * n
        for ref in refs:
            rv, rn = vectorize(ref)
            penalty = length_penalty(len(cand) - len(ref), sigma)
            for k in range(n):
                val = sum(min(x, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, x in cv[k].items())
                if cn[k] != 0 and rn[k] != 0:
                    val /= cn[k] * rn[k]
                acc[k] += val * penalty
        scores.append(10.0 * (sum(acc) / n) / len(refs))
    corpus = sum(scores) / len(scores)
    return (corpus, scores) if per_image else corpus
