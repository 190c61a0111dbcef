"""Shared builders and oracles for the test suite."""

from __future__ import annotations

import functools

import numpy as np

from capcond import tensor as T
from capcond.architectures import ArchitectureKind, ModelConfig, build_model
from capcond.data import build_vocabulary, encoded_pairs, generate_synthetic
from capcond.evaluation.language import corpus_perplexity
from capcond.training import TrainConfig, batch_loss, train

KINDS = [k.value for k in ArchitectureKind]


def rel_err(a, b) -> float:
    """Symmetric relative error of two arrays: |a-b| / (|a|+|b|)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def tiny_config(kind, layer_size=8, vocab_size=12, image_dim=16, **kw) -> ModelConfig:
    kind = ArchitectureKind.parse(kind)
    if kind is ArchitectureKind.INIT_INJECT:
        kw["rnn_init_state"] = "image"
    else:
        kw.setdefault("rnn_init_state", "learnable")
    kw.setdefault("init_method", "xavier_normal")
    kw.setdefault("init_range", 1.0)
    return ModelConfig(layer_size=layer_size, vocab_size=vocab_size, kind=kind,
                       image_dim=image_dim, **kw)


def tiny_model(kind, seed=0, randomize_biases=True, **kw):
    """Random model; biases and s0 are perturbed so their gradients are generic."""
    model = build_model(tiny_config(kind, **kw), seed)
    if randomize_biases:
        rng = np.random.default_rng(seed + 1000)
        for name, p in model.params.items():
            if name == "s0" or ".b" in name:
                p.data[...] = rng.normal(0, 0.3, p.shape)
    return model


def random_batch(seed, vocab_size=12, image_dim=16, batch=3, length=4):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(batch, image_dim)) + 0.1
    caps = [list(rng.integers(3, vocab_size, size=length)) for _ in range(batch)]
    return feats, caps


def loss_gradcheck(model, feats, caps, dropout_seed=None, l2=0.0, per_param=None, seed=0):
    """Worst relative error between tape and finite-difference gradients.

    Dropout masks are replayed from ``dropout_seed`` for every evaluation.
    ``per_param`` limits the check to that many random coordinates per array.
    """
    def rng():
        return None if dropout_seed is None else np.random.default_rng(dropout_seed)

    def f():
        with T.no_grad():
            return batch_loss(model, feats, caps, rng(), l2).item()

    model.zero_grad()
    with T.Tape() as tape:
        loss = batch_loss(model, feats, caps, rng(), l2)
    tape.backward(loss)
    pick = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.params.items():
        idx = None
        if per_param is not None and p.size > per_param:
            idx = pick.choice(p.size, size=per_param, replace=False)
        num = T.finite_difference_grad(f, p, 1e-5, idx)
        ana = np.zeros(p.shape) if p.grad is None else p.grad
        mask = ~np.isnan(num)
        worst = max(worst, rel_err(ana[mask], num[mask]))
    return worst


SYNTH_SETTINGS = dict(init_method="xavier_normal", init_range=1.0, normalize_image=False,
                      minibatch_size=8)


@functools.lru_cache(maxsize=None)
def synthetic_corpus(seed=0, n_images=200, n_attributes=3, n_values=3, noise=0.01):
    ds, store = generate_synthetic(seed, n_images, n_attributes, n_values=n_values, noise=noise)
    vocab = build_vocabulary(ds.train_captions())
    return ds, store, vocab


@functools.lru_cache(maxsize=None)
def trained_synthetic(kind, seed=0, max_epochs=100, layer_size=32, **data_kw):
    """Train one architecture on the synthetic set (cached across tests)."""
    ds, store, vocab = synthetic_corpus(seed, **data_kw)
    kind = ArchitectureKind.parse(kind)
    state = "image" if kind is ArchitectureKind.INIT_INJECT else "learnable"
    cfg = ModelConfig(layer_size=layer_size, vocab_size=len(vocab), kind=kind,
                      image_dim=store.dim, rnn_init_state=state, max_epochs=max_epochs,
                      **SYNTH_SETTINGS)
    model = build_model(cfg, seed)
    val = encoded_pairs(ds, vocab, "val")
    result = train(model, encoded_pairs(ds, vocab, "train"), store.matrix,
                   TrainConfig.for_model(model, seed=seed),
                   lambda m: corpus_perplexity(m, val, store.matrix))
    return model, result, (ds, store, vocab)
