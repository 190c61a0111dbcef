"""Multi-run aggregation: mean and population standard deviation per metric."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvaluationReport:
    metrics: dict[str, float] = field(default_factory=dict)
    per_run: dict[str, list[float]] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        keys = sorted(self.metrics)
        return {k: {"per_run": self.per_run.get(k, [self.metrics[k]]),
                    "mean": self.metrics[k], "std": self.std.get(k, 0.0)} for k in keys}

    @classmethod
    def from_json(cls, d: dict) -> "EvaluationReport":
        return cls({k: v["mean"] for k, v in d.items()},
                   {k: list(v["per_run"]) for k, v in d.items()},
                   {k: v["std"] for k, v in d.items()})


def aggregate_runs(reports: list[EvaluationReport]) -> EvaluationReport:
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = set(reports[0].metrics)
    for i, r in enumerate(reports[1:], start=1):
        if set(r.metrics) != keys:
            diff = sorted(keys ^ set(r.metrics))
            raise ValueError(f"report {i} metric keys differ from report 0: {diff}")
    out = EvaluationReport()
    for k in sorted(keys):
        vals = np.array([r.metrics[k] for r in reports], dtype=np.float64)
        out.per_run[k] = vals.tolist()
        out.metrics[k] = float(vals.mean())
        # population std: the runs are the whole population being described
        out.std[k] = float(vals.std(ddof=0))
    return out
