"""Hyperparameter tuning pipeline driven by validation CIDEr.

Stages: random search, pluggable extra proposal strategies, greedy hill
climbing, then dedupe/average, Hamming-diverse finalist selection and a
sweep over maximum epochs and beam width with repeated runs.  Every
evaluation goes through a JSON-lines journal so a rerun skips finished work.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .architectures import ArchitectureKind

log = logging.getLogger(__name__)

Combination = dict
Evaluator = Callable[[Combination, int, int, int], float]

DROPOUT_AXES = ("dropout_image", "dropout_image_proj", "dropout_embedding", "dropout_rnn_output")


@dataclass(frozen=True)
class HparamSpace:
    axes: tuple[tuple[str, tuple], ...]

    @classmethod
    def for_kind(cls, kind) -> "HparamSpace":
        kind = ArchitectureKind.parse(kind)
        axes = [
            ("init_method", ("normal", "xavier_normal")),
            ("init_range", (0.1, 0.01)),
            ("layer_size", (64, 128, 256, 512)),
            ("normalize_image", (True, False)),
            ("image_activation", ("relu", "none")),
            ("rnn_init_state", ("zeros", "learnable")),
            ("l2_enabled", (True, False)),
            *((name, (True, False)) for name in DROPOUT_AXES),
            ("minibatch_size", (32, 64, 128)),
        ]
        if kind is ArchitectureKind.INIT_INJECT:
            axes = [a for a in axes if a[0] != "rnn_init_state"]
        return cls(tuple(axes))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.axes]

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for _, v in self.axes]))

    def point(self, index: int) -> Combination:
        """Mixed-radix decoding of a flat index (last axis varies fastest)."""
        combo = {}
        for name, values in reversed(self.axes):
            index, r = divmod(index, len(values))
            combo[name] = values[r]
        return {n: combo[n] for n in self.names}

    def neighbors(self, combo: Combination) -> list[Combination]:
        out = []
        for name, values in self.axes:
            for v in values:
                if v != combo[name]:
                    out.append({**combo, name: v})
        return out


def combo_key(combo: Combination) -> str:
    return json.dumps(combo, sort_keys=True)


def hamming(a: Combination, b: Combination) -> int:
    return sum(a.get(k) != b.get(k) for k in set(a) | set(b))


def to_model_fields(combo: Combination, kind) -> dict:
    """Translate a combination into ModelConfig keyword arguments."""
    kind = ArchitectureKind.parse(kind)
    fields = {k: v for k, v in combo.items() if k not in DROPOUT_AXES}
    fields["dropout_sites"] = {a[len("dropout_"):] for a in DROPOUT_AXES if combo.get(a)}
    if kind is ArchitectureKind.INIT_INJECT:
        fields["rnn_init_state"] = "image"
    return fields


@dataclass
class Trial:
    combination: Combination
    scores: list[float] = field(default_factory=list)

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.0

    @property
    def key(self) -> str:
        return combo_key(self.combination)


class BudgetExhausted(RuntimeError):
    pass


@dataclass
class Budget:
    """Caps fresh evaluations by count and/or wall-clock seconds."""
    max_evaluations: int | None = None
    max_seconds: float | None = None
    used: int = 0
    started: float = field(default_factory=time.monotonic)

    def spend(self) -> None:
        if self.max_evaluations is not None and self.used >= self.max_evaluations:
            raise BudgetExhausted(f"evaluation budget of {self.max_evaluations} spent")
        if self.max_seconds is not None and time.monotonic() - self.started > self.max_seconds:
            raise BudgetExhausted(f"time budget of {self.max_seconds}s spent")
        self.used += 1


class Journal:
    """Append-only record of evaluations keyed by (combination, seed, epochs, beam)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.entries: dict[tuple, dict] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        e = json.loads(line)
                        self.entries[self._key(e["combination"], e["seed"], e["epochs"],
                                               e["beam"])] = e

    @staticmethod
    def _key(combo, seed, epochs, beam):
        return (combo_key(combo), int(seed), int(epochs), int(beam))

    def get(self, combo, seed, epochs, beam) -> dict | None:
        return self.entries.get(self._key(combo, seed, epochs, beam))

    def add(self, entry: dict) -> None:
        self.entries[self._key(entry["combination"], entry["seed"], entry["epochs"],
                               entry["beam"])] = entry
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def evaluate(evaluator: Evaluator, combo: Combination, seed: int, epochs: int, beam: int,
             journal: Journal | None = None, budget: Budget | None = None) -> float:
    """Score one setting, reusing the journal when it already holds the answer."""
    if journal is not None:
        hit = journal.get(combo, seed, epochs, beam)
        if hit is not None:
            return float(hit["cider"])
    if budget is not None:
        budget.spend()
    try:
        score, status = float(evaluator(combo, seed, epochs, beam)), "ok"
    except Exception as exc:  # a failed trial scores zero but is kept
        log.warning("evaluation failed for %s: %s", combo_key(combo), exc)
        score, status = 0.0, f"error: {exc}"
    if journal is not None:
        journal.add({"combination": combo, "seed": seed, "epochs": epochs, "beam": beam,
                     "cider": score, "status": status})
    return score


def random_stage(space: HparamSpace, n: int, seed: int, evaluator: Evaluator,
                 journal: Journal | None = None, budget: Budget | None = None,
                 epochs: int = 10, beam: int = 2) -> list[Trial]:
    """Evaluate ``n`` distinct random combinations once each."""
    if n > space.size:
        log.warning("only %d combinations exist; evaluating all of them", space.size)
        n = space.size
    rng = np.random.default_rng(seed)
    indices = rng.choice(space.size, size=n, replace=False)
    trials = []
    for i in indices:
        combo = space.point(int(i))
        try:
            score = evaluate(evaluator, combo, seed, epochs, beam, journal, budget)
        except BudgetExhausted:
            break
        trials.append(Trial(combo, [score]))
    return trials


@dataclass
class ClimbResult:
    best: Trial
    evaluated: list[Trial]
    exhausted: bool = False


def hill_climb(start: Trial, space: HparamSpace, evaluator: Evaluator, seed: int = 0,
               journal: Journal | None = None, budget: Budget | None = None,
               epochs: int = 10, beam: int = 2) -> ClimbResult:
    """Move to the best strictly better single-axis neighbour until none exists."""
    incumbent = start
    evaluated: list[Trial] = []
    while True:
        best_move = None
        for combo in space.neighbors(incumbent.combination):
            try:
                score = evaluate(evaluator, combo, seed, epochs, beam, journal, budget)
            except BudgetExhausted:
                return ClimbResult(incumbent, evaluated, True)
            trial = Trial(combo, [score])
            evaluated.append(trial)
            if score > incumbent.mean_score and (best_move is None or score > best_move.mean_score):
                best_move = trial
        if best_move is None:
            return ClimbResult(incumbent, evaluated)
        incumbent = best_move


def dedupe(trials: Iterable[Trial]) -> list[Trial]:
    """Merge repeated combinations, pooling their scores."""
    merged: dict[str, Trial] = {}
    for t in trials:
        if t.key in merged:
            merged[t.key].scores.extend(t.scores)
        else:
            merged[t.key] = Trial(dict(t.combination), list(t.scores))
    return list(merged.values())


def select_finalists(trials: Iterable[Trial], top: int = 10, k: int = 3) -> list[Trial]:
    """Best trial plus the k-1 others from the top list maximising summed pairwise Hamming distance."""
    pool = sorted(dedupe(trials), key=lambda t: (-t.mean_score, t.key))[:top]
    if len(pool) < k:
        log.warning("only %d distinct combinations; returning all", len(pool))
        return pool
    best, rest = pool[0], pool[1:]

    def rank(group):
        members = (best,) + group
        spread = sum(hamming(a.combination, b.combination)
                     for a, b in itertools.combinations(members, 2))
        return (-spread, -sum(t.mean_score for t in group), [t.key for t in group])

    choice = min(itertools.combinations(rest, k - 1), key=rank)
    return [best, *choice]


@dataclass
class SweepCell:
    combination: Combination
    epochs: int
    beam: int
    scores: list[float]

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))


def final_sweep(finalists: Sequence[Trial], evaluator: Evaluator,
                epochs_grid: Sequence[int] = (10, 100), beam_grid: Sequence[int] = (1, 2, 3, 4, 5, 6),
                seeds: Sequence[int] = (0, 1, 2), journal: Journal | None = None,
                budget: Budget | None = None) -> tuple[SweepCell, list[SweepCell]]:
    """Average several seeded runs for every (finalist, epochs, beam) cell; return the best."""
    if not finalists:
        raise ValueError("no finalists to sweep")
    cells = []
    for f_idx, trial in enumerate(finalists):
        for epochs in epochs_grid:
            for beam in beam_grid:
                scores = []
                for s in seeds:
                    try:
                        scores.append(evaluate(evaluator, trial.combination, s, epochs, beam,
                                               journal, budget))
                    except BudgetExhausted:
                        break
                if scores:
                    cells.append((f_idx, SweepCell(trial.combination, epochs, beam, scores)))
    if not cells:
        raise BudgetExhausted("budget spent before any sweep cell was scored")
    best = min(cells, key=lambda fc: (-fc[1].mean_score, fc[1].epochs, fc[1].beam, fc[0]))[1]
    return best, [c for _, c in cells]


Strategy = Callable[[list[Trial], HparamSpace, Evaluator], list[Trial]]


@dataclass
class SearchResult:
    trials: list[Trial]
    finalists: list[Trial]
    best: SweepCell
    sweep: list[SweepCell]


def search(space: HparamSpace, evaluator: Evaluator, n_random: int = 100, seed: int = 0,
           strategies: Sequence[Strategy] = (), journal: Journal | None = None,
           budget: Budget | None = None, sweep_seeds: Sequence[int] = (0, 1, 2),
           epochs_grid: Sequence[int] = (10, 100),
           beam_grid: Sequence[int] = (1, 2, 3, 4, 5, 6), stage_epochs: int = 10,
           stage_beam: int = 2) -> SearchResult:
    """The whole pipeline; ``strategies`` fill the slot for model-based proposers.

    ``stage_epochs`` and ``stage_beam`` apply to the random and hill-climbing
    stages.  If the budget runs out before any sweep cell is scored, the best
    searched combination is reported at those stage settings.
    """
    trials = random_stage(space, n_random, seed, evaluator, journal, budget,
                          stage_epochs, stage_beam)
    for strategy in strategies:
        trials += strategy(trials, space, evaluator)
    if not trials:
        raise BudgetExhausted("budget spent before any trial was scored")
    start = max(dedupe(trials), key=lambda t: (t.mean_score, [-ord(c) for c in t.key]))
    climb = hill_climb(start, space, evaluator, seed, journal, budget, stage_epochs, stage_beam)
    trials += climb.evaluated
    finalists = select_finalists(trials)
    try:
        best, sweep = final_sweep(finalists, evaluator, epochs_grid, beam_grid, sweep_seeds,
                                  journal, budget)
    except BudgetExhausted:
        log.warning("budget spent before the sweep; reporting the best searched combination")
        top = finalists[0]
        best, sweep = SweepCell(top.combination, stage_epochs, stage_beam, list(top.scores)), []
    return SearchResult(trials, finalists, best, sweep)
