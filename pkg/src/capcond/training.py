"""Cross-entropy training with Adam and early stopping on validation perplexity."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .architectures import END, L2_COEFFICIENT, START, CaptionModel
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_coefficient: float = 0.0
    minibatch_size: int = 32
    max_epochs: int = 100
    seed: int = 0
    min_caption_len: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def for_model(cls, model: CaptionModel, seed: int = 0, **overrides) -> "TrainConfig":
        cfg = model.config
        base = dict(l2_coefficient=L2_COEFFICIENT if cfg.l2_enabled else 0.0,
                    minibatch_size=cfg.minibatch_size, max_epochs=cfg.max_epochs, seed=seed)
        base.update(overrides)
        return cls(**base)


def teacher_forcing(captions: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Prefix (START + words) and target (words + END) matrices for equal-length captions."""
    if len({len(c) for c in captions}) != 1:
        raise ValueError("captions in one batch must share a length")
    ids = np.asarray(captions, dtype=np.int64)
    n = ids.shape[0]
    prefixes = np.concatenate([np.full((n, 1), START), ids], axis=1)
    targets = np.concatenate([ids, np.full((n, 1), END)], axis=1)
    return prefixes, targets


def batch_loss(model: CaptionModel, features: np.ndarray, captions: Sequence[Sequence[int]],
               rng=None, l2_coefficient: float = 0.0) -> Tensor:
    """Mean per-position cross-entropy of a same-length batch, plus optional L2."""
    prefixes, targets = teacher_forcing(captions)
    steps = model.sequence_log_probs(features, prefixes, targets, rng)
    total = steps[0] if len(steps) == 1 else T.stack_sum(steps)
    loss = T.scale(T.mean_all(total), -1.0 / len(steps))
    if l2_coefficient:
        penalty = [T.sum_squares(model.params[n]) for n in model.weight_names()]
        loss = T.add(loss, T.scale(T.stack_sum(penalty), l2_coefficient))
    return loss


def caption_loss(model: CaptionModel, image_feature: np.ndarray, caption_ids: Sequence[int],
                 min_caption_len: int = 1) -> float:
    """Mean of -ln P(next token) over the words and the final END."""
    if len(caption_ids) < min_caption_len:
        raise ValueError(f"caption has {len(caption_ids)} tokens, fewer than {min_caption_len}")
    with T.no_grad():
        return batch_loss(model, np.asarray(image_feature)[None, :], [list(caption_ids)]).item()


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    r: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.r[name] = np.zeros_like(p.data)
        r = state.r[name]
        m *= b1
        m += (1 - b1) * g
        r *= b2
        r += (1 - b2) * g * g
        p.data -= (config.alpha * (m / c1) / (np.sqrt(r / c2) + config.epsilon)).astype(p.data.dtype)


def minibatches(pairs: Sequence[tuple[int, list[int]]], size: int,
                rng: np.random.Generator) -> list[list[tuple[int, list[int]]]]:
    """Shuffle, bucket by caption length, chunk; the last chunk of a bucket may be short."""
    order = rng.permutation(len(pairs))
    buckets: dict[int, list] = {}
    for i in order:
        buckets.setdefault(len(pairs[i][1]), []).append(pairs[i])
    batches = []
    for length in sorted(buckets):
        items = buckets[length]
        batches.extend(items[k:k + size] for k in range(0, len(items), size))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_perplexity: float


@dataclass
class TrainResult:
    log: list[EpochRecord]
    best_epoch: int
    stopped_early: bool


def train(model: CaptionModel, train_pairs: Sequence[tuple[int, list[int]]],
          features: np.ndarray, config: TrainConfig,
          validation_hook: Callable[[CaptionModel], float],
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train in place; returns the epoch log.

    ``train_pairs`` holds (feature row, caption ids).  After each epoch
    ``validation_hook(model)`` gives the validation perplexity; the first
    epoch that is worse than the one before stops training and the previous
    epoch's weights are restored.
    """
    if not train_pairs:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history: list[EpochRecord] = []
    snapshot = model.state_dict()
    prev = math.inf
    best_epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        losses, weights = [], []
        for batch in minibatches(train_pairs, config.minibatch_size, rng):
            feats = features[[i for i, _ in batch]]
            caps = [c for _, c in batch]
            model.zero_grad()
            with T.Tape() as tape:
                loss = batch_loss(model, feats, caps, rng, config.l2_coefficient)
            tape.backward(loss)
            grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, state, config)
            losses.append(loss.item())
            weights.append(len(batch) * (len(caps[0]) + 1))
        ppl = float(validation_hook(model))
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), ppl)
        history.append(rec)
        log.info("epoch %d loss %.4f val perplexity %.4f", epoch, rec.train_loss, ppl)
        if on_epoch:
            on_epoch(rec)
        if ppl > prev:
            model.load_state_dict(snapshot)
            return TrainResult(history, best_epoch, True)
        prev = ppl
        best_epoch = epoch
        snapshot = model.state_dict()
    return TrainResult(history, best_epoch, False)
