"""Likelihood-based scores: caption perplexity and image retrieval."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..architectures import END, START, CaptionModel


def caption_log_probs(model: CaptionModel, features: np.ndarray,
                      caption_ids: Sequence[int], include_end: bool = True) -> np.ndarray:
    """Natural-log probability of each caption position, for a batch of images.

    Every row of ``features`` is scored against the same caption; returns a
    matrix of shape (images, positions).
    """
    features = np.atleast_2d(features)
    n = features.shape[0]
    ids = list(caption_ids)
    prefixes = np.array([[START] + ids] * n, dtype=np.int64)
    targets = np.array([ids + [END]] * n, dtype=np.int64)
    if not include_end:
        prefixes, targets = prefixes[:, :-1], targets[:, :-1]
    with T.no_grad():
        steps = model.sequence_log_probs(features, prefixes, targets)
    return np.stack([s.data.astype(np.float64) for s in steps], axis=1)


def caption_perplexity(model: CaptionModel, image_feature: np.ndarray,
                       caption_ids: Sequence[int], include_end: bool = True) -> float:
    """2 ** (mean base-2 surprisal); infinite when some position has probability 0."""
    lp = caption_log_probs(model, image_feature, caption_ids, include_end)[0]
    if np.any(np.isneginf(lp)):
        return math.inf
    bits = float((-lp / math.log(2)).mean())
    # beyond the float64 range the probability is zero for all practical purposes
    return math.inf if bits >= 1024 else 2.0 ** bits


def geometric_mean(values: Sequence[float]) -> float:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("geometric mean of nothing")
    if np.any(np.isinf(vals)):
        return math.inf
    return float(np.exp(np.log(vals).mean()))


def corpus_perplexity(model: CaptionModel, pairs: Sequence[tuple[int, list[int]]],
                      features: np.ndarray, include_end: bool = True) -> float:
    """Geometric mean of per-caption perplexities over (feature row, ids) pairs."""
    by_len: dict[int, list[tuple[int, list[int]]]] = {}
    for row, ids in pairs:
        by_len.setdefault(len(ids), []).append((row, ids))
    log_ppl = []
    with T.no_grad():
        for length in sorted(by_len):
            group = by_len[length]
            rows = [r for r, _ in group]
            ids = np.array([c for _, c in group], dtype=np.int64).reshape(len(group), length)
            prefixes = np.concatenate([np.full((len(group), 1), START), ids], axis=1)
            targets = np.concatenate([ids, np.full((len(group), 1), END)], axis=1)
            if not include_end:
                prefixes, targets = prefixes[:, :-1], targets[:, :-1]
            steps = model.sequence_log_probs(features[rows], prefixes, targets)
            lp = np.stack([s.data.astype(np.float64) for s in steps], axis=1)
            log_ppl.extend(-lp.mean(axis=1))
    log_ppl = np.asarray(log_ppl)
    if np.any(np.isinf(log_ppl)):
        return math.inf
    # geometric mean of exp(mean nats) is exp of the mean
    return float(np.exp(log_ppl.mean()))


def rank_images(model: CaptionModel, caption_ids: Sequence[int], image_pool: np.ndarray,
                correct: int = 0, include_end: bool = True) -> tuple[list[int], int]:
    """Pool indices ordered by caption likelihood, and the 1-based rank of ``correct``."""
    scores = caption_log_probs(model, image_pool, caption_ids, include_end).sum(axis=1)
    # stable sort on the negated score keeps pool order among ties
    order = [int(i) for i in np.argsort(-scores, kind="stable")]
    return order, order.index(correct) + 1


def recall_summary(ranks: Sequence[int], ns: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {f"R@{n}": 100.0 * float(np.mean(ranks <= n)) for n in ns}
    out["median_rank"] = float(np.median(ranks))
    return out


def retrieval_report(model: CaptionModel, pool: Sequence[tuple[int, list[int]]],
                     features: np.ndarray, pool_cap: int = 1000,
                     include_end: bool = True) -> dict[str, float]:
    """R@1/5/10 and median rank over (feature row, first caption) pairs.

    Only the first ``pool_cap`` entries take part, both as queries and as the
    image pool.
    """
    pool = list(pool)[:pool_cap]
    if not pool:
        raise ValueError("retrieval pool is empty")
    images = features[[row for row, _ in pool]]
    ranks = [rank_images(model, ids, images, correct=i, include_end=include_end)[1]
             for i, (_, ids) in enumerate(pool)]
    return recall_summary(ranks)
