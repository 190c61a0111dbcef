"""Command-line entry point: ``capcond <subcommand> [options]``.

Experiment settings come from a flat JSON file (``--config``) and can be
overridden by flags of the same name (``--layer-size 64`` or
``--layer_size 64``).  Failures print one JSON object to stderr and exit
nonzero: 2 for usage errors (bad flags, missing files, invalid settings),
1 for everything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import architectures as A
from .architectures import ArchitectureKind, ConfigError, ModelConfig
from .data import (DataError, Vocabulary, build_vocabulary, convert_karpathy,
                   generate_synthetic, read_dataset, write_dataset, write_features)
from .evaluation import EvaluationReport, aggregate_runs, cider_d
from .evaluation.language import corpus_perplexity
from .experiment import (Corpus, ExperimentConfig, default_output_dir, diversity_metrics,
                         format_table, generate_captions, generation_metrics,
                         likelihood_metrics, load_model, run_protocol, train_run)
from .hparams import Budget, HparamSpace, Journal, search, to_model_fields
from .probe import retention_probe
from .training import TrainConfig, train
from .util import atomic_write, read_jsonl, write_csv, write_json, write_jsonl

log = logging.getLogger("capcond")


class UsageError(Exception):
    """Bad command line or configuration; exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "y", "on"):
        return True
    if low in ("0", "false", "no", "n", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _list(kind):
    def parse(text: str):
        return [kind(p) for p in str(text).split(",") if p.strip()]
    return parse


_FIELD_TYPES = {bool: _bool, int: int, float: float, str: str}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per ExperimentConfig key, in both dashed and underscored spelling."""
    p.add_argument("--config", help="JSON file with experiment keys")
    for f in fields(ExperimentConfig):
        if f.name == "output_dir":  # shared --output-dir flag
            continue
        default = None if f.default is dataclasses.MISSING else f.default
        if f.name == "dropout_sites":
            conv = _list(str)
        elif f.name == "seeds":
            conv = _list(int)
        else:
            conv = _FIELD_TYPES.get(type(default), str)
        flags = {f"--{f.name.replace('_', '-')}", f"--{f.name}"}
        p.add_argument(*sorted(flags), dest=f"cfg_{f.name}", type=conv, default=None,
                       metavar=f.name.upper())


def resolve_config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config: file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise UsageError("config: top level must be a JSON object")
    for f in fields(ExperimentConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            raw[f.name] = value
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _output_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if getattr(args, "output_dir", None):
        return Path(args.output_dir)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(default_output_dir())


def _require(path: str, key: str) -> str:
    if not path:
        raise UsageError(f"{key}: required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{key}: file not found: {path}")
    return path


def _corpus(cfg: ExperimentConfig, vocab: Vocabulary | None = None) -> Corpus:
    return Corpus.load(_require(cfg.dataset, "dataset"), _require(cfg.features, "features"),
                       cfg.min_frequency, vocab)


# -- subcommands ------------------------------------------------------------

def cmd_synth_data(args) -> dict:
    ds, store = generate_synthetic(args.seed, args.n_images, args.n_attributes,
                                   n_values=args.n_values, noise=args.noise)
    out = _output_dir(args)
    write_dataset(ds, out / "dataset.json")
    write_features(store, out / "features.bin")
    meta = {"seed": args.seed, "n_images": args.n_images, "n_attributes": args.n_attributes,
            "n_values": args.n_values, "noise": args.noise}
    write_json(out / "synthetic.json", meta)
    return {"dataset": str(out / "dataset.json"), "features": str(out / "features.bin"),
            "images": len(ds.images)}


def cmd_convert_karpathy(args) -> dict:
    ds, store = convert_karpathy(_require(args.karpathy_json, "karpathy_json"),
                                 _require(args.features, "features") if args.features else None)
    out = _output_dir(args)
    write_dataset(ds, out / "dataset.json")
    result = {"dataset": str(out / "dataset.json"), "images": len(ds.images)}
    if store is not None:
        write_features(store, out / "features.bin")
        result["features"] = str(out / "features.bin")
    return result


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    corpus = _corpus(cfg)
    out = _output_dir(args, cfg)
    model, result = train_run(cfg, corpus, args.seed)
    header = {"experiment": cfg.to_dict(), "seed": args.seed, "vocab": corpus.vocab.to_dict()}
    A.save_checkpoint(model, out / "model.ccm", header)
    write_csv(out / "epoch_log.csv", ["epoch", "train_loss", "val_perplexity"],
              [(r.epoch, r.train_loss, r.val_perplexity) for r in result.log])
    write_json(out / "run.json", {"experiment": cfg.to_dict(), "seed": args.seed,
                                  "best_epoch": result.best_epoch,
                                  "stopped_early": result.stopped_early})
    return {"checkpoint": str(out / "model.ccm"), "epochs": len(result.log),
            "best_epoch": result.best_epoch}


def _model_and_corpus(args):
    model, vocab, header = load_model(_require(args.model, "model"))
    exp = dict(header.get("experiment", {}))
    for key in ("dataset", "features"):
        if getattr(args, key, None):
            exp[key] = getattr(args, key)
    cfg = ExperimentConfig.from_dict(exp) if exp else None
    if cfg is None:
        raise UsageError("model: checkpoint carries no experiment header")
    return model, _corpus(cfg, vocab), cfg, header


def cmd_generate(args) -> dict:
    model, corpus, cfg, header = _model_and_corpus(args)
    width = args.beam_width or cfg.beam_width
    rows = generate_captions(model, corpus, args.split, width, cfg.min_len, cfg.max_len,
                             cfg.length_normalize)
    out = _output_dir(args, cfg)
    write_jsonl(out / "captions.jsonl", rows)
    write_json(out / "captions.run.json", {"experiment": cfg.to_dict(),
                                           "seed": header.get("seed"), "split": args.split,
                                           "beam_width": width})
    return {"captions": str(out / "captions.jsonl"), "count": len(rows)}


def cmd_evaluate(args) -> dict:
    ds = read_dataset(_require(args.dataset, "dataset"))
    captions = read_jsonl(_require(args.captions, "captions"))
    vocab = build_vocabulary(ds.train_captions(), args.min_frequency)
    corpus = Corpus(ds, None, vocab)
    ref_vocab = vocab if args.unknown_references else None
    metrics = {**generation_metrics(captions, ds, args.split, ref_vocab),
               **diversity_metrics(captions, corpus)}
    out = _output_dir(args)
    write_json(out / "evaluation.json", {"captions": args.captions, "split": args.split,
                                         "metrics": metrics})
    return metrics


def cmd_retrieve(args) -> dict:
    model, corpus, cfg, header = _model_and_corpus(args)
    metrics = likelihood_metrics(model, corpus, args.split, args.pool_cap)
    out = _output_dir(args, cfg)
    write_json(out / "retrieval.json", {"experiment": cfg.to_dict(), "seed": header.get("seed"),
                                        "split": args.split, "metrics": metrics})
    return metrics


def cmd_probe(args) -> dict:
    model, corpus, cfg, header = _model_and_corpus(args)
    curve = retention_probe(model, corpus.pairs(args.split), corpus.store.matrix,
                            args.caption_len, args.repetitions, args.seed)
    out = _output_dir(args, cfg)
    write_csv(out / "retention.csv", ["position", "mean_distance"], curve.rows())
    write_json(out / "retention.run.json", {
        "experiment": cfg.to_dict(), "seed": header.get("seed"), "probe_seed": args.seed,
        "split": args.split, "caption_len": args.caption_len,
        "repetitions": args.repetitions, "captions": curve.n_captions})
    return {"curve": str(out / "retention.csv"), "captions": curve.n_captions,
            "std_over_positions": float(np.std(curve.distances))}


def make_evaluator(cfg: ExperimentConfig, corpus: Corpus):
    """CIDEr of validation captions after training one combination."""
    feats = corpus.store.matrix
    val = corpus.pairs("val")
    train_pairs = corpus.pairs("train")

    def evaluator(combo, seed, epochs, beam):
        fields_ = to_model_fields(combo, cfg.kind)
        mc = ModelConfig(kind=cfg.kind, vocab_size=len(corpus.vocab), image_dim=corpus.store.dim,
                         max_epochs=epochs, beam_width=beam, **fields_)
        model = A.build_model(mc, seed)
        train(model, train_pairs, feats, TrainConfig.for_model(model, seed=seed),
              lambda m: corpus_perplexity(m, val, feats))
        rows = generate_captions(model, corpus, "val", beam, cfg.min_len, cfg.max_len,
                                 cfg.length_normalize)
        refs = {im.id: im.captions for im in corpus.dataset.split("val")}
        return cider_d([r["tokens"] for r in rows], [refs[r["image_id"]] for r in rows])

    return evaluator


def cmd_search_hparams(args) -> dict:
    cfg = resolve_config(args)
    corpus = _corpus(cfg)
    out = _output_dir(args, cfg)
    journal = Journal(args.journal or out / "journal.jsonl")
    budget = Budget(args.max_evaluations, args.max_seconds)
    space = HparamSpace.for_kind(cfg.kind)
    if args.layer_sizes:
        space = HparamSpace(tuple((n, tuple(args.layer_sizes)) if n == "layer_size" else (n, v)
                                  for n, v in space.axes))
    result = search(space, make_evaluator(cfg, corpus), n_random=args.n_random, seed=args.seed,
                    journal=journal, budget=budget, sweep_seeds=args.sweep_seeds,
                    epochs_grid=args.epochs_grid, beam_grid=args.beam_grid,
                    stage_epochs=args.stage_epochs, stage_beam=args.stage_beam)
    best = {"experiment": cfg.to_dict(), "combination": result.best.combination,
            "epochs": result.best.epochs, "beam": result.best.beam,
            "cider": result.best.mean_score, "scores": result.best.scores,
            "finalists": [t.combination for t in result.finalists]}
    write_json(out / "best.json", best)
    return best


def cmd_count_params(args) -> dict:
    if args.preset:
        cfg = A.preset(args.preset, args.vocab_size, args.image_dim)
        _, _, dataset = args.preset.rpartition("-")
        vocab = cfg.vocab_size
    else:
        if not (args.kind and args.layer_size and args.vocab_size):
            raise UsageError("count-params: give --preset, or --kind, --layer-size and --vocab-size")
        cfg = ModelConfig(layer_size=args.layer_size, vocab_size=args.vocab_size,
                          kind=args.kind, image_dim=args.image_dim,
                          rnn_init_state="image" if ArchitectureKind.parse(args.kind)
                          is ArchitectureKind.INIT_INJECT else args.rnn_init_state)
        dataset, vocab = "", cfg.vocab_size
    count = A.count_parameters(cfg)
    result = {"kind": cfg.kind.value, "parameters": count, "vocab_size": vocab,
              "image_dim": cfg.image_dim}
    print(f"{cfg.kind.value}: {count} parameters")
    if args.preset:
        suffix = f"-{dataset}" if dataset in A.DATASET_VOCAB else ""
        init = A.count_parameters(A.preset("init-inject" + suffix, args.vocab_size or None,
                                           args.image_dim))
        merge = A.count_parameters(A.preset("merge" + suffix, args.vocab_size or None,
                                            args.image_dim))
        result.update(init_inject=init, merge=merge, init_merge_ratio=init / merge)
        print(f"init-inject/merge ratio: {init / merge:.4f} ({init} / {merge})")
    return result


def _collect_runs(patterns) -> dict[str, list[dict]]:
    paths = sorted({p for pat in patterns for p in glob.glob(str(Path(pat) / "**" / "metrics.json"),
                                                            recursive=True)})
    if not paths:
        raise FileNotFoundError(f"runs: no metrics.json under {list(patterns)}")
    groups: dict[str, list[dict]] = {}
    for p in paths:
        rec = json.loads(Path(p).read_text(encoding="utf-8"))
        name = rec.get("experiment", {}).get("kind", "run")
        groups.setdefault(name, []).append(rec)
    return groups


def cmd_report(args) -> dict:
    groups = _collect_runs(args.runs)
    reports = {}
    for name, recs in groups.items():
        recs.sort(key=lambda r: r.get("seed", 0))
        reports[name] = aggregate_runs([EvaluationReport(r["metrics"]) for r in recs])
    order = [k.value for k in ArchitectureKind if k.value in reports]
    order += sorted(set(reports) - set(order))
    reports = {k: reports[k] for k in order}
    out = _output_dir(args)
    table = format_table(reports)
    write_json(out / "report.json", {k: r.to_json() for k, r in reports.items()})
    atomic_write(out / "report.md", table)
    print(table, end="")
    return {"report": str(out / "report.json"), "groups": {k: len(groups[k]) for k in reports}}


def cmd_run(args) -> dict:
    cfg = resolve_config(args)
    agg = run_protocol(cfg, _corpus(cfg), _output_dir(args, cfg), args.split)
    return agg.to_json()


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capcond", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--output-dir", "--output_dir", dest="output_dir",
                       help="defaults to $CAPCOND_OUTPUT_DIR or ./runs")
        return p

    p = command("synth-data", cmd_synth_data, "write a seeded synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--n-attributes", type=int, default=3)
    p.add_argument("--n-values", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.01)

    p = command("convert-karpathy", cmd_convert_karpathy, "ingest a Karpathy split file")
    p.add_argument("--karpathy-json", required=True)
    p.add_argument("--features", help=".mat (key 'feats') or .npy feature matrix")

    p = command("train", cmd_train, "train one model")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=1)

    for name, func, help_ in (("generate", cmd_generate, "beam-search captions for a split"),
                              ("retrieve", cmd_retrieve, "caption-to-image retrieval"),
                              ("probe", cmd_probe, "visual retention curve")):
        p = command(name, func, help_)
        p.add_argument("--model", required=True)
        p.add_argument("--dataset")
        p.add_argument("--features")
        p.add_argument("--split", default="test")
        if name == "generate":
            p.add_argument("--beam-width", type=int, default=None)
        if name == "retrieve":
            p.add_argument("--pool-cap", type=int, default=1000)
        if name == "probe":
            p.add_argument("--caption-len", type=int, default=20)
            p.add_argument("--repetitions", type=int, default=100)
            p.add_argument("--seed", type=int, default=0)

    p = command("evaluate", cmd_evaluate, "score a captions file")
    p.add_argument("--captions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--min-frequency", type=int, default=5)
    p.add_argument("--unknown-references", action="store_true",
                   help="map out-of-vocabulary reference words to the UNKNOWN token")

    p = command("search-hparams", cmd_search_hparams, "tune hyperparameters on validation CIDEr")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-random", type=int, default=10)
    p.add_argument("--journal")
    p.add_argument("--max-evaluations", type=int)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--sweep-seeds", type=_list(int), default=[0, 1])
    p.add_argument("--epochs-grid", type=_list(int), default=[10, 100])
    p.add_argument("--beam-grid", type=_list(int), default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--stage-epochs", type=int, default=10)
    p.add_argument("--stage-beam", type=int, default=2)
    p.add_argument("--layer-sizes", type=_list(int),
                   help="replace the layer_size axis (desk-scale searches)")

    p = command("count-params", cmd_count_params, "exact trainable parameter count")
    p.add_argument("--preset", help=f"one of {', '.join(A.preset_names())}")
    p.add_argument("--kind")
    p.add_argument("--layer-size", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--image-dim", type=int, default=4096)
    p.add_argument("--rnn-init-state", default="zeros")

    p = command("report", cmd_report, "aggregate metrics.json files into mean (std) tables")
    p.add_argument("runs", nargs="+", help="directories searched recursively")

    p = command("run", cmd_run, "train, generate and score every configured seed")
    _add_config_flags(p)
    p.add_argument("--split", default="test")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
        if args.command not in ("count-params", "report"):
            print(json.dumps(result, sort_keys=True))
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        return _fail("usage", exc, 2)
    except DataError as exc:
        return _fail("data", exc, 1)
    except Exception as exc:  # report, don't trace
        return _fail(type(exc).__name__, exc, 1)


def _fail(kind: str, exc: BaseException, status: int) -> int:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    print(json.dumps({"error": kind, "message": msg, "status": status}), file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
