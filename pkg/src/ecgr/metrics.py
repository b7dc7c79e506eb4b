"""Accuracy, per-class F1, replication aggregation, and table/plot-data emission.

Values are kept at full precision internally; the paper-style two-decimal
rounding happens only when markdown tables are rendered.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import NUM_CLASSES, EmotionClass

STRATEGY_ORDER = ("current_model", "joint", "fine_tune", "ecgr", "ecgr_qa", "ecgr_wqa")
STRATEGY_TITLES = {
    "current_model": "Current model",
    "joint": "Joining datasets",
    "fine_tune": "Fine-Tuning",
    "ecgr": "ECgr",
    "ecgr_qa": "ECgr+QA",
    "ecgr_wqa": "ECgr+wQA",
}

TABLE_FORMATS = ("csv", "json", "markdown-table", "plot-data")


class MetricsError(ValueError):
    """Raised for empty inputs or mismatched result shapes."""


def accuracy(predictions, labels) -> float:
    """Fraction of predictions equal to labels."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise MetricsError(f"length mismatch: {preds.shape} vs {labs.shape}")
    if preds.size == 0:
        raise MetricsError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == labs))


def per_class_f1(predictions, labels, num_classes: int = NUM_CLASSES) -> dict[int, float]:
    """One-vs-rest F1 per class; 0 by convention when precision + recall is 0."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise MetricsError(f"length mismatch: {preds.shape} vs {labs.shape}")
    scores: dict[int, float] = {}
    for cls in range(num_classes):
        tp = int(np.sum((preds == cls) & (labs == cls)))
        fp = int(np.sum((preds == cls) & (labs != cls)))
        fn = int(np.sum((preds != cls) & (labs == cls)))
        denom = 2 * tp + fp + fn
        scores[cls] = 2 * tp / denom if denom > 0 else 0.0
    return scores


def mean_over_datasets(accuracies: Sequence[float]) -> float:
    """Arithmetic mean at full precision; render with :func:`format_metric`."""
    if len(accuracies) == 0:
        raise MetricsError("mean over an empty accuracy list is undefined")
    return float(np.mean(np.asarray(accuracies, dtype=np.float64)))


def format_metric(value: float) -> str:
    """Two-decimal table rendering, matching the reported precision."""
    return f"{value:.2f}"


@dataclass
class StepMetrics:
    """Evaluation of one classifier on one dataset's test split."""

    dataset_name: str
    accuracy: float
    per_class_f1: dict[int, float]
    sample_count: int

    def to_dict(self) -> dict:
        return {"dataset_name": self.dataset_name, "accuracy": self.accuracy,
                "per_class_f1": {str(k): v for k, v in sorted(self.per_class_f1.items())},
                "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "StepMetrics":
        return cls(d["dataset_name"], d["accuracy"],
                   {int(k): v for k, v in d["per_class_f1"].items()}, d["sample_count"])


@dataclass
class ContinualRunResult:
    """Per-step metrics of one continual run; step k evaluates k+1 datasets."""

    strategy: str
    seed: int
    replication: int
    step_labels: tuple[str, ...]
    steps: tuple[tuple[StepMetrics, ...], ...]
    train_sizes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.step_labels = tuple(self.step_labels)
        self.steps = tuple(tuple(s) for s in self.steps)
        self.train_sizes = tuple(self.train_sizes)
        for k, step in enumerate(self.steps):
            if len(step) != k + 1:
                raise MetricsError(f"step {k} must hold {k + 1} dataset metrics, "
                                   f"got {len(step)}")

    @property
    def dataset_sequence(self) -> tuple[str, ...]:
        return tuple(m.dataset_name for m in self.steps[-1])

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed,
                "replication": self.replication, "step_labels": list(self.step_labels),
                "steps": [[m.to_dict() for m in step] for step in self.steps],
                "train_sizes": list(self.train_sizes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ContinualRunResult":
        return cls(d["strategy"], d["seed"], d["replication"], tuple(d["step_labels"]),
                   tuple(tuple(StepMetrics.from_dict(m) for m in step) for step in d["steps"]),
                   tuple(d.get("train_sizes", ())))


@dataclass
class CellStat:
    mean: float
    std: float


@dataclass
class AggregateResult:
    """Per-cell mean and population standard deviation over replications."""

    strategy: str
    step_labels: tuple[str, ...]
    dataset_sequence: tuple[str, ...]
    accuracy_cells: dict[tuple[int, str], CellStat]
    f1_cells: dict[tuple[int, str, int], CellStat]
    replications: int
    failed_replications: int = 0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "step_labels": list(self.step_labels),
            "dataset_sequence": list(self.dataset_sequence),
            "replications": self.replications,
            "failed_replications": self.failed_replications,
            "accuracy_cells": [
                {"step": k, "dataset": ds, "mean": c.mean, "std": c.std}
                for (k, ds), c in sorted(self.accuracy_cells.items())
            ],
            "f1_cells": [
                {"step": k, "dataset": ds, "class_id": cls, "mean": c.mean, "std": c.std}
                for (k, ds, cls), c in sorted(self.f1_cells.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateResult":
        return cls(
            strategy=d["strategy"],
            step_labels=tuple(d["step_labels"]),
            dataset_sequence=tuple(d["dataset_sequence"]),
            accuracy_cells={(c["step"], c["dataset"]): CellStat(c["mean"], c["std"])
                            for c in d["accuracy_cells"]},
            f1_cells={(c["step"], c["dataset"], c["class_id"]): CellStat(c["mean"], c["std"])
                      for c in d["f1_cells"]},
            replications=d["replications"],
            failed_replications=d.get("failed_replications", 0),
        )


def aggregate_replications(results: Sequence[ContinualRunResult]) -> AggregateResult:
    """Sample mean and population std of every table cell over replications."""
    if not results:
        raise MetricsError("no results to aggregate")
    first = results[0]
    for r in results[1:]:
        if r.strategy != first.strategy:
            raise MetricsError(f"mixed strategies: {first.strategy!r} vs {r.strategy!r}")
        if r.step_labels != first.step_labels or len(r.steps) != len(first.steps):
            raise MetricsError("replications disagree on plan shape")
        for k, step in enumerate(r.steps):
            if tuple(m.dataset_name for m in step) != \
                    tuple(m.dataset_name for m in first.steps[k]):
                raise MetricsError(f"replications disagree on datasets at step {k}")

    acc_cells: dict[tuple[int, str], CellStat] = {}
    f1_cells: dict[tuple[int, str, int], CellStat] = {}
    for k, step in enumerate(first.steps):
        for j, m in enumerate(step):
            accs = np.asarray([r.steps[k][j].accuracy for r in results], dtype=np.float64)
            acc_cells[(k, m.dataset_name)] = CellStat(float(accs.mean()),
                                                      float(accs.std(ddof=0)))
            for cls in sorted(m.per_class_f1):
                vals = np.asarray([r.steps[k][j].per_class_f1[cls] for r in results],
                                  dtype=np.float64)
                f1_cells[(k, m.dataset_name, cls)] = CellStat(float(vals.mean()),
                                                              float(vals.std(ddof=0)))
    return AggregateResult(first.strategy, first.step_labels, first.dataset_sequence,
                           acc_cells, f1_cells, replications=len(results))


def _table_rows(dataset_sequence: tuple[str, ...], step: int) -> list[tuple[str, str]]:
    """(kind, name) rows for one step's table: datasets plus mean rows."""
    sources = list(dataset_sequence[:step])
    target = dataset_sequence[step]
    if len(sources) == 1:
        return [("dataset", sources[0]), ("dataset", target), ("mean", "Mean")]
    rows: list[tuple[str, str]] = [("dataset", ds) for ds in sources]
    rows.append(("mean", "Mean"))
    rows.append(("dataset", target))
    rows.append(("updated_mean", "Updated mean"))
    return rows


def _row_cell(agg: AggregateResult, kind: str, name: str, step: int) -> CellStat:
    if kind == "dataset":
        return agg.accuracy_cells[(step, name)]
    seq = agg.dataset_sequence
    if kind == "mean" and len(seq[:step]) >= 2:
        names = seq[:step]
    else:  # single-source "Mean" and every "Updated mean" cover all seen datasets
        names = seq[:step + 1]
    value = mean_over_datasets([agg.accuracy_cells[(step, ds)].mean for ds in names])
    return CellStat(value, 0.0)


def emit_report(aggregates: Mapping[str, AggregateResult], out_dir: str | Path,
                formats: Sequence[str] = TABLE_FORMATS) -> list[Path]:
    """Write per-step tables and per-dataset plot-data series.

    ``aggregates`` maps strategy name to its AggregateResult; all entries
    must share the same plan shape. Tables carry one column per strategy in
    canonical order, one row per seen dataset plus Mean / Updated-mean rows.
    """
    unknown = [f for f in formats if f not in TABLE_FORMATS]
    if unknown:
        raise MetricsError(f"unknown report formats: {unknown}; expected {TABLE_FORMATS}")
    if not aggregates:
        raise MetricsError("no aggregates to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    strategies = [s for s in STRATEGY_ORDER if s in aggregates]
    strategies += [s for s in aggregates if s not in STRATEGY_ORDER]
    ref = aggregates[strategies[0]]
    for s in strategies[1:]:
        if aggregates[s].dataset_sequence != ref.dataset_sequence:
            raise MetricsError(f"strategy {s!r} disagrees on the dataset sequence")
    seq = ref.dataset_sequence
    n_steps = len(ref.step_labels)

    written: list[Path] = []
    for k in range(1, n_steps):
        rows = _table_rows(seq, k)
        cells = {(kind, name, s): _row_cell(aggregates[s], kind, name, k)
                 for kind, name in rows for s in strategies}

        if "csv" in formats:
            path = out_dir / f"table_{k}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                header = ["row", "kind"]
                for s in strategies:
                    header += [f"{s}_mean", f"{s}_std"]
                writer.writerow(header)
                for kind, name in rows:
                    out_row = [name, kind]
                    for s in strategies:
                        c = cells[(kind, name, s)]
                        out_row += [repr(c.mean), repr(c.std)]
                    writer.writerow(out_row)
            written.append(path)

        if "json" in formats:
            path = out_dir / f"table_{k}.json"
            doc = {"step": k, "target": seq[k], "strategies": strategies,
                   "rows": [{"name": name, "kind": kind,
                             "cells": {s: {"mean": cells[(kind, name, s)].mean,
                                           "std": cells[(kind, name, s)].std}
                                       for s in strategies}}
                            for kind, name in rows]}
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
            written.append(path)

        if "markdown-table" in formats:
            path = out_dir / f"table_{k}.md"
            lines = [f"### Adaptation step {k}: target {seq[k]}", ""]
            lines.append("| | " + " | ".join(STRATEGY_TITLES.get(s, s)
                                             for s in strategies) + " |")
            lines.append("|---" * (len(strategies) + 1) + "|")
            for kind, name in rows:
                rendered = []
                for s in strategies:
                    c = cells[(kind, name, s)]
                    if kind == "dataset":
                        rendered.append(f"{format_metric(c.mean)}±{format_metric(c.std)}")
                    else:
                        rendered.append(format_metric(c.mean))
                label = name if kind == "dataset" else f"**{name}**"
                lines.append(f"| {label} | " + " | ".join(rendered) + " |")
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)

    if "plot-data" in formats:
        for j, ds in enumerate(seq):
            path = out_dir / f"plotdata_accuracy_{ds}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["strategy", "step_index", "step_label", "mean", "std"])
                for s in strategies:
                    for k in range(j, n_steps):
                        c = aggregates[s].accuracy_cells[(k, ds)]
                        label = "Baseline" if k == j else seq[k]
                        writer.writerow([s, k, label, repr(c.mean), repr(c.std)])
            written.append(path)

            path = out_dir / f"plotdata_f1_{ds}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["strategy", "step_index", "step_label",
                                 "class_id", "class_name", "mean", "std"])
                for s in strategies:
                    for k in range(j, n_steps):
                        label = "Baseline" if k == j else seq[k]
                        for cls in range(NUM_CLASSES):
                            cell = aggregates[s].f1_cells.get((k, ds, cls))
                            if cell is None:
                                continue
                            writer.writerow([s, k, label, cls, EmotionClass(cls).label,
                                             repr(cell.mean), repr(cell.std)])
            written.append(path)

    return written
