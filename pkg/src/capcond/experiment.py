"""One experiment run end to end: train, generate, score; plus multi-run protocol."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .architectures import (ArchitectureKind, CaptionModel, ModelConfig, build_model,
                            load_checkpoint, save_checkpoint)
from .data import Dataset, FeatureStore, Vocabulary, build_vocabulary, encoded_pairs, load_dataset
from .decoding import beam_search
from .evaluation import (EvaluationReport, aggregate_runs, bleu, cider_d, corpus_perplexity,
                         diversity_report, retrieval_report, rouge_l)
from .training import TrainConfig, TrainResult, train
from .util import write_csv, write_json, write_jsonl

log = logging.getLogger(__name__)

OUTPUT_ENV = "CAPCOND_OUTPUT_DIR"
MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in ("vocab_size", "image_dim")]


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class ExperimentConfig:
    """Flat, JSON-serialisable settings for one architecture on one dataset."""
    kind: str = "merge"
    layer_size: int = 32
    init_method: str = "normal"
    init_range: float = 0.1
    normalize_image: bool = True
    image_activation: str = "none"
    rnn_init_state: str = "zeros"
    l2_enabled: bool = False
    dropout_sites: list = field(default_factory=list)
    minibatch_size: int = 32
    max_epochs: int = 100
    beam_width: int = 3
    min_frequency: int = 5
    min_len: int = 5
    max_len: int = 50
    length_normalize: bool = False
    unknown_references: bool = False
    dataset: str = ""
    features: str = ""
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = ""

    def __post_init__(self):
        self.kind = ArchitectureKind.parse(self.kind).value
        if ArchitectureKind(self.kind) is ArchitectureKind.INIT_INJECT:
            self.rnn_init_state = "image"
        self.dropout_sites = sorted(self.dropout_sites)
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds: values must be distinct")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ValueError(f"unknown config keys: {extra}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, vocab_size: int, image_dim: int) -> ModelConfig:
        kw = {k: getattr(self, k) for k in MODEL_KEYS}
        return ModelConfig(vocab_size=vocab_size, image_dim=image_dim, **kw)


@dataclass
class Corpus:
    dataset: Dataset
    store: FeatureStore
    vocab: Vocabulary

    @classmethod
    def load(cls, dataset_path, features_path, min_frequency: int = 5,
             vocab: Vocabulary | None = None) -> "Corpus":
        ds, store = load_dataset(dataset_path, features_path)
        return cls(ds, store, vocab or build_vocabulary(ds.train_captions(), min_frequency))

    def pairs(self, split: str, first_caption_only: bool = False):
        return encoded_pairs(self.dataset, self.vocab, split, first_caption_only)


def train_run(cfg: ExperimentConfig, corpus: Corpus, seed: int) -> tuple[CaptionModel, TrainResult]:
    model = build_model(cfg.model_config(len(corpus.vocab), corpus.store.dim), seed)
    val = corpus.pairs("val")
    feats = corpus.store.matrix
    result = train(model, corpus.pairs("train"), feats, TrainConfig.for_model(model, seed=seed),
                   lambda m: corpus_perplexity(m, val, feats))
    return model, result


def generate_captions(model: CaptionModel, corpus: Corpus, split: str, width: int,
                      min_len: int = 5, max_len: int = 50,
                      length_normalize: bool = False) -> list[dict]:
    rows = []
    for im in corpus.dataset.split(split):
        hyp = beam_search(model, corpus.store[im.feature_index], width, min_len, max_len,
                          length_normalize=length_normalize)
        rows.append({"image_id": im.id, "tokens": corpus.vocab.decode(hyp.words),
                     "log_prob": float(hyp.log_prob)})
    return rows


def generation_metrics(captions: Sequence[dict], dataset: Dataset, split: str,
                       vocab: Vocabulary | None = None) -> dict[str, float]:
    """BLEU-1..4, ROUGE-L and CIDEr-D against the split's references.

    References are compared as written unless ``vocab`` is given, in which
    case their out-of-vocabulary words become the UNKNOWN token first.
    """
    refs_by_id = {im.id: im.captions for im in dataset.split(split)}
    if vocab is not None:
        refs_by_id = {k: [vocab.decode(vocab.encode(c)) for c in caps]
                      for k, caps in refs_by_id.items()}
    missing = [c["image_id"] for c in captions if c["image_id"] not in refs_by_id]
    if missing:
        raise ValueError(f"captions for images not in the {split} split: {missing[:3]}")
    cands = [c["tokens"] for c in captions]
    refs = [refs_by_id[c["image_id"]] for c in captions]
    out = {f"BLEU-{n}": bleu(cands, refs, n) for n in range(1, 5)}
    out["ROUGE-L"] = rouge_l(cands, refs)
    out["CIDEr-D"] = cider_d(cands, refs)
    return out


def diversity_metrics(captions: Sequence[dict], corpus: Corpus) -> dict[str, float]:
    return diversity_report([c["tokens"] for c in captions], corpus.dataset.train_captions(),
                            corpus.vocab.words)


def likelihood_metrics(model: CaptionModel, corpus: Corpus, split: str,
                       pool_cap: int = 1000) -> dict[str, float]:
    feats = corpus.store.matrix
    out = retrieval_report(model, corpus.pairs(split, first_caption_only=True), feats, pool_cap)
    out["perplexity"] = corpus_perplexity(model, corpus.pairs(split), feats)
    return out


def run_once(cfg: ExperimentConfig, corpus: Corpus, seed: int, out_dir, split: str = "test") -> dict:
    """Train, decode and score one seed; every artifact lands in ``out_dir``."""
    out_dir = Path(out_dir)
    model, result = train_run(cfg, corpus, seed)
    header = {"experiment": cfg.to_dict(), "seed": seed, "vocab": corpus.vocab.to_dict()}
    save_checkpoint(model, out_dir / "model.ccm", header)
    write_csv(out_dir / "epoch_log.csv", ["epoch", "train_loss", "val_perplexity"],
              [(r.epoch, r.train_loss, r.val_perplexity) for r in result.log])
    captions = generate_captions(model, corpus, split, cfg.beam_width, cfg.min_len, cfg.max_len,
                                 cfg.length_normalize)
    write_jsonl(out_dir / "captions.jsonl", captions)
    ref_vocab = corpus.vocab if cfg.unknown_references else None
    metrics = {**generation_metrics(captions, corpus.dataset, split, ref_vocab),
               **diversity_metrics(captions, corpus),
               **likelihood_metrics(model, corpus, split)}
    write_json(out_dir / "metrics.json", {"experiment": cfg.to_dict(), "seed": seed,
                                          "split": split, "metrics": metrics})
    return metrics


def run_protocol(cfg: ExperimentConfig, corpus: Corpus, out_dir, split: str = "test") -> EvaluationReport:
    """Repeat :func:`run_once` for each configured seed and aggregate."""
    out_dir = Path(out_dir)
    reports = []
    for seed in cfg.seeds:
        metrics = run_once(cfg, corpus, seed, out_dir / f"seed-{seed}", split)
        reports.append(EvaluationReport(metrics))
    agg = aggregate_runs(reports)
    write_json(out_dir / "report.json", {"experiment": cfg.to_dict(), "metrics": agg.to_json()})
    return agg


def load_model(path) -> tuple[CaptionModel, Vocabulary, dict]:
    model, header = load_checkpoint(path)
    vocab = Vocabulary.from_dict(header["vocab"]) if "vocab" in header else None
    return model, vocab, header


def format_table(reports: dict[str, EvaluationReport], digits: int = 3) -> str:
    """Markdown table, one column per architecture, cells as ``mean (std)``."""
    names = list(reports)
    metrics = sorted({k for r in reports.values() for k in r.metrics})
    lines = ["| metric | " + " | ".join(names) + " |",
             "|---" * (len(names) + 1) + "|"]
    for m in metrics:
        cells = []
        for n in names:
            r = reports[n]
            cells.append(f"{r.metrics[m]:.{digits}f} ({r.std.get(m, 0.0):.{digits}f})"
                         if m in r.metrics else "-")
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
