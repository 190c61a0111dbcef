"""How much of the image survives in the multimodal vector as words are read.

For a caption held fixed, the multimodal vector (input to the output layer)
is recorded after every prefix, once with the true image and once with a
random other image; the curve is the mean absolute difference per position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .architectures import START, CaptionModel
from .tensor import DimensionError


@dataclass
class RetentionCurve:
    distances: np.ndarray  # length caption_len + 1; position 0 is after START
    caption_len: int
    repetitions: int
    seed: int
    n_captions: int = 0

    def rows(self) -> list[tuple[int, float]]:
        return [(i, float(d)) for i, d in enumerate(self.distances)]


def mean_abs_diff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mean_abs_diff: shapes {a.shape} and {b.shape} differ")
    return float(np.abs(a - b).mean())


def multimodal_trajectory(model: CaptionModel, features: np.ndarray,
                          caption_ids: Sequence[int]) -> np.ndarray:
    """Multimodal vectors for every prefix length, shape (images, len+1, dim)."""
    features = np.atleast_2d(features)
    state = model.feed(model.begin(features), [START] * features.shape[0])
    out = [model.multimodal(state)]
    for tok in caption_ids:
        state = model.feed(state, [tok] * features.shape[0])
        out.append(model.multimodal(state))
    return np.stack(out, axis=1).astype(np.float64)


def retention_probe(model: CaptionModel, pairs: Sequence[tuple[int, list[int]]],
                    features: np.ndarray, caption_len: int = 20, repetitions: int = 100,
                    seed: int = 0) -> RetentionCurve:
    """Mean multimodal-vector distance between true and replacement images.

    ``pairs`` are (feature row, caption ids) for one split.  Every caption of
    exactly ``caption_len`` tokens is probed ``repetitions`` times, each time
    with a replacement drawn uniformly from the split's other images.
    """
    rows = sorted({row for row, _ in pairs})
    qualifying = [(row, ids) for row, ids in pairs if len(ids) == caption_len]
    if not qualifying:
        lengths = sorted({len(ids) for _, ids in pairs})
        raise ValueError(f"no caption of length {caption_len}; available lengths: {lengths}")
    if len(rows) < 2:
        raise ValueError("the split needs at least two images to draw replacements")
    rng = np.random.default_rng(seed)
    total = np.zeros(caption_len + 1)
    for row, ids in qualifying:
        others = [r for r in rows if r != row]
        picks = [others[i] for i in rng.integers(0, len(others), size=repetitions)]
        orig = multimodal_trajectory(model, features[row][None, :], ids)[0]
        repl = multimodal_trajectory(model, features[picks], ids)
        total += np.abs(repl - orig[None]).mean(axis=2).sum(axis=0)
    distances = total / (len(qualifying) * repetitions)
    return RetentionCurve(distances, caption_len, repetitions, seed, len(qualifying))
