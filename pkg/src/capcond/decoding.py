"""Beam search with minimum/maximum caption length, and a brute-force oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .architectures import END, START, UNKNOWN, CaptionModel


class DecodeError(ValueError):
    """Bad decoding request."""


@dataclass(frozen=True)
class Hypothesis:
    """A partial or complete caption.

    ``token_ids`` follow START.  ``finished`` means the caption was closed
    by END, which is then its last id; a caption cut off at the length
    limit is complete but not finished.
    """
    token_ids: tuple[int, ...]
    log_prob: float
    finished: bool = False

    @property
    def words(self) -> list[int]:
        ids = list(self.token_ids)
        if ids and ids[-1] == END:
            ids.pop()
        return ids

    def key(self):
        return (-self.log_prob, self.token_ids)


def banned_tokens(allow_unknown: bool = False) -> list[int]:
    """Ids never emitted: START always, UNKNOWN unless allowed."""
    return [START] if allow_unknown else [START, UNKNOWN]


def _masked(log_probs: np.ndarray, n_words: int, min_len: int, banned) -> np.ndarray:
    lp = np.array(log_probs, dtype=np.float64)
    lp[..., banned] = -np.inf
    if n_words < min_len:
        lp[..., END] = -np.inf
    return lp


def _check_lengths(min_len: int, max_len: int) -> None:
    if min_len < 0 or max_len < 1 or min_len > max_len:
        raise DecodeError(f"invalid length bounds min_len={min_len}, max_len={max_len}")


def beam_search(model: CaptionModel, image_feature: np.ndarray, width: int,
                min_len: int = 5, max_len: int = 50, allow_unknown: bool = False,
                length_normalize: bool = False) -> Hypothesis:
    """Best caption under summed log-probability.

    END is unavailable until ``min_len`` words exist and a caption reaching
    ``max_len`` words is closed without END.  At each step the ``width``
    best extensions survive; completed ones retire from the beam.  Ties go to
    the lexicographically smaller id sequence.  With ``length_normalize``
    completed captions compete on log-probability per token instead; the
    returned ``log_prob`` is always the plain sum.
    """
    if width < 1:
        raise DecodeError(f"beam width must be at least 1, got {width}")
    _check_lengths(min_len, max_len)
    banned = banned_tokens(allow_unknown)
    state = model.feed(model.begin(image_feature), [START])
    live = [Hypothesis((), 0.0)]
    complete: list[Hypothesis] = []
    while live:
        lp = model.next_log_probs(state)
        n_words = len(live[0].token_ids)
        lp = _masked(lp, n_words, min_len, banned)
        scores = np.array([h.log_prob for h in live])[:, None] + lp
        candidates = []
        rows, cols = np.nonzero(np.isfinite(scores))
        for r, c in zip(rows.tolist(), cols.tolist()):
            candidates.append((-scores[r, c], live[r].token_ids + (c,), r))
        candidates.sort()
        survivors, parents = [], []
        for neg, ids, r in candidates[:width]:
            if ids[-1] == END:
                complete.append(Hypothesis(ids, -neg, True))
            elif len(ids) >= max_len:
                complete.append(Hypothesis(ids, -neg, False))
            else:
                survivors.append(Hypothesis(ids, -neg))
                parents.append(r)
        if complete and survivors and not length_normalize:
            best_done = min(h.key() for h in complete)
            # scores only fall as captions grow, so a complete caption that
            # beats every live one cannot be overtaken
            if best_done <= min(h.key() for h in survivors):
                break
        live = survivors
        if live:
            state = model.feed(state.select(parents), [h.token_ids[-1] for h in live])
    if not complete:
        raise DecodeError("no caption satisfies the length constraints")
    if length_normalize:
        return min(complete, key=lambda h: (-h.log_prob / len(h.token_ids), h.token_ids))
    return min(complete, key=Hypothesis.key)


def exhaustive_decode(model: CaptionModel, image_feature: np.ndarray, min_len: int,
                      max_len: int, allow_unknown: bool = False,
                      limit: int = 10 ** 6) -> Hypothesis:
    """Score every legal caption and return the best (same tie rule as beam search)."""
    _check_lengths(min_len, max_len)
    v = model.config.vocab_size
    if v ** max_len > limit:
        raise DecodeError(f"{v}^{max_len} sequences exceed the enumeration guard {limit}")
    banned = banned_tokens(allow_unknown)
    best: list[Hypothesis] = []

    def visit(state, ids, total):
        lp = _masked(model.next_log_probs(state)[0], len(ids), min_len, banned)
        if len(ids) >= min_len:
            cands = [Hypothesis(ids + (END,), total + lp[END], True)] if len(ids) < max_len \
                else [Hypothesis(ids, total, False)]
            for hyp in cands:
                if np.isfinite(hyp.log_prob) and (not best or hyp.key() < best[0].key()):
                    best[:] = [hyp]
        if len(ids) == max_len:
            return
        for tok in range(v):
            if tok == END or not np.isfinite(lp[tok]):
                continue
            visit(model.feed(state, [tok]), ids + (tok,), total + lp[tok])

    visit(model.feed(model.begin(image_feature), [START]), (), 0.0)
    if not best:
        raise DecodeError("no caption satisfies the length constraints")
    return Hypothesis(best[0].token_ids, float(best[0].log_prob), best[0].finished)


def greedy_decode(model: CaptionModel, image_feature: np.ndarray, min_len: int = 5,
                  max_len: int = 50, allow_unknown: bool = False) -> Hypothesis:
    """Argmax chaining; equal to beam search with width 1."""
    _check_lengths(min_len, max_len)
    banned = banned_tokens(allow_unknown)
    state = model.feed(model.begin(image_feature), [START])
    ids: list[int] = []
    total = 0.0
    while True:
        lp = _masked(model.next_log_probs(state)[0], len(ids), min_len, banned)
        tok = int(np.argmax(lp))
        total += lp[tok]
        ids.append(tok)
        if tok == END or len(ids) >= max_len:
            return Hypothesis(tuple(ids), total, tok == END)
        state = model.feed(state, [tok])
