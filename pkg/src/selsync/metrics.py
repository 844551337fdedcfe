"""Run bookkeeping: per-step records, summaries, evaluation, and file output.

One record is produced per (step, worker). The summary reduces the records
to the headline quantities: the local-to-synchronous step ratio (LSSR), the
communication reduction it implies, traffic totals, and the test metrics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .model import Batch, ModelSpec, ParamVector, forward_logits, forward_loss


@dataclass(frozen=True)
class MetricsRecord:
    """One worker-step of training, as written to metrics.jsonl."""

    step: int
    worker_id: int
    loss: float
    grad_norm_sq: float
    ewma: float
    delta_g: Optional[float]
    decision: str
    bytes_sent: int
    bytes_received: int
    step_duration: float
    lr: float

    def __post_init__(self):
        if self.decision not in ("sync", "local"):
            raise ConfigError(f"decision must be 'sync' or 'local', got {self.decision!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class RunSummary:
    total_steps: int
    steps_local: int
    steps_bsp: int
    lssr: float
    comm_reduction: float
    final_metric: Optional[float]
    best_metric: Optional[float]
    wall_time: float
    total_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def lssr(steps_local: int, steps_bsp: int) -> float:
    """Fraction of steps that were purely local."""
    if steps_local < 0 or steps_bsp < 0:
        raise ValueError("step counts must be non-negative")
    total = steps_local + steps_bsp
    if total == 0:
        raise ValueError("LSSR undefined for an empty run")
    return steps_local / total


def comm_reduction(ratio: float) -> float:
    """Communication reduction factor implied by an LSSR value."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"LSSR must lie in [0, 1], got {ratio}")
    if ratio == 1.0:
        return math.inf
    return 1.0 / (1.0 - ratio)


def evaluate(params: ParamVector, dataset, spec: ModelSpec) -> dict:
    """Accuracy and mean cross-entropy over the full split. Deterministic."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    batch = Batch(dataset.features, dataset.labels)
    logits = forward_logits(params, batch.features, spec)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    mean_loss = float(forward_loss(params, batch, spec))
    return {"accuracy": accuracy, "mean_loss": mean_loss}


def summarize(
    rows: Sequence[MetricsRecord], eval_rows: Sequence[dict], wall_time: float
) -> RunSummary:
    if not rows:
        raise ValueError("cannot summarize a run with no records")
    steps_local = sum(1 for r in rows if r.decision == "local")
    steps_bsp = len(rows) - steps_local
    ratio = lssr(steps_local, steps_bsp)
    evals = sorted(eval_rows, key=lambda e: e["step"])
    final_metric = evals[-1]["accuracy"] if evals else None
    best_metric = max(e["accuracy"] for e in evals) if evals else None
    total_bytes = sum(r.bytes_sent + r.bytes_received for r in rows)
    return RunSummary(
        total_steps=len(rows),
        steps_local=steps_local,
        steps_bsp=steps_bsp,
        lssr=ratio,
        comm_reduction=comm_reduction(ratio),
        final_metric=final_metric,
        best_metric=best_metric,
        wall_time=float(wall_time),
        total_bytes=total_bytes,
    )


def sorted_rows(rows: Sequence[MetricsRecord]) -> list[MetricsRecord]:
    return sorted(rows, key=lambda r: (r.step, r.worker_id))


def write_metrics_jsonl(rows: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in sorted_rows(rows):
            fh.write(json.dumps(rec.to_dict(), sort_keys=True))
            fh.write("\n")


def load_metrics_jsonl(path) -> list[MetricsRecord]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(MetricsRecord.from_dict(json.loads(line)))
    return rows


def write_eval_csv(eval_rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "accuracy", "mean_loss"])
        for e in sorted(eval_rows, key=lambda e: e["step"]):
            writer.writerow([e["step"], repr(float(e["accuracy"])), repr(float(e["mean_loss"]))])


def load_eval_csv(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                {
                    "step": int(row["step"]),
                    "accuracy": float(row["accuracy"]),
                    "mean_loss": float(row["mean_loss"]),
                }
            )
    return out


def write_summary_json(summary: RunSummary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_summary_json(path) -> RunSummary:
    with open(path, "r", encoding="utf-8") as fh:
        return RunSummary.from_dict(json.load(fh))


def eval_curve(rows: Sequence[MetricsRecord], eval_rows: Sequence[dict]) -> list[tuple[float, float]]:
    """(time, accuracy) points for the evaluating worker.

    The time axis is the running sum of worker 0's step durations, so curves
    from different strategies compare on the same logical clock.
    """
    time_at = {}
    elapsed = 0.0
    for rec in sorted_rows([r for r in rows if r.worker_id == 0]):
        elapsed += rec.step_duration
        time_at[rec.step] = elapsed
    curve = []
    for e in sorted(eval_rows, key=lambda e: e["step"]):
        if e["step"] not in time_at:
            raise ValueError(f"evaluation at step {e['step']} has no matching record")
        curve.append((time_at[e["step"]], float(e["accuracy"])))
    return curve


def time_to_target(curve: Sequence[tuple[float, float]], target: float) -> Optional[float]:
    for t, acc in curve:
        if acc >= target:
            return t
    return None


def compare_runs(
    baseline: RunSummary,
    candidate: RunSummary,
    baseline_curve: Sequence[tuple[float, float]],
    candidate_curve: Sequence[tuple[float, float]],
) -> dict:
    """Convergence difference (accuracy points) and time-to-target speedup.

    The target is the baseline's final accuracy; the speedup is None when the
    candidate never reaches it.
    """
    if baseline.final_metric is None or candidate.final_metric is None:
        raise ValueError("both runs need a final metric to compare")
    conv_diff = 100.0 * (candidate.final_metric - baseline.final_metric)
    target = baseline.final_metric
    t_base = time_to_target(baseline_curve, target)
    t_cand = time_to_target(candidate_curve, target)
    speedup = None
    if t_base is not None and t_cand is not None and t_cand > 0:
        speedup = t_base / t_cand
    return {
        "conv_diff": conv_diff,
        "speedup": speedup,
        "outperforms": conv_diff > 0.0,
    }
