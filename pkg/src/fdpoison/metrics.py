"""Accuracy, convergence series, misleading-effect statistics and export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Dataset
from .errors import ConfigError, InputError
from .nn import DenseNet, forward


def predict(net: DenseNet, features) -> np.ndarray:
    """Top-1 class per row; ties resolve to the lowest class index."""
    return np.argmax(forward(net, features), axis=1)


def evaluate(net: DenseNet, test: Dataset, class_weights=None) -> float:
    """Top-1 accuracy on ``test``.

    With ``class_weights`` the per-class accuracies are averaged with those
    weights instead of by test-set frequency; this scores a client on a test
    distribution matching its own label mix while reusing the shared split.
    """
    if test.dim != net.input_dim:
        raise ConfigError(f"test width {test.dim} != net input width {net.input_dim}")
    correct = predict(net, test.features) == test.labels
    if class_weights is None:
        return float(np.mean(correct))
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (test.n_classes,) or np.any(w < 0) or w.sum() <= 0:
        raise InputError("class_weights must be a non-negative vector over classes")
    counts = np.bincount(test.labels, minlength=test.n_classes)
    hits = np.bincount(test.labels, weights=correct.astype(np.float64), minlength=test.n_classes)
    w = np.where(counts > 0, w, 0.0)
    if w.sum() <= 0:
        raise InputError("no test samples for any weighted class")
    per_class = np.divide(hits, counts, out=np.zeros_like(hits), where=counts > 0)
    return float(np.dot(w, per_class) / w.sum())


@dataclass
class ConvergenceSeries:
    rounds: list[int]
    per_client: np.ndarray  # (n_rounds, K)

    def __post_init__(self):
        self.per_client = np.asarray(self.per_client, dtype=np.float64)
        if any(b <= a for a, b in zip(self.rounds, self.rounds[1:])):
            raise InputError("rounds must be strictly increasing")
        if self.per_client.shape[0] != len(self.rounds):
            raise InputError("one accuracy row per round required")

    @classmethod
    def from_reports(cls, reports) -> "ConvergenceSeries":
        return cls([r.round for r in reports], np.stack([r.per_client_accuracy for r in reports]))

    @property
    def mean(self) -> np.ndarray:
        return self.per_client.mean(axis=1)

    @property
    def min(self) -> np.ndarray:
        return self.per_client.min(axis=1)

    @property
    def max(self) -> np.ndarray:
        return self.per_client.max(axis=1)

    @property
    def final_mean(self) -> float:
        return float(self.mean[-1])

    def first_round_reaching(self, fraction: float = 0.95) -> int:
        """First round whose mean accuracy reaches ``fraction`` of the final value."""
        target = fraction * self.final_mean
        for r, m in zip(self.rounds, self.mean):
            if m >= target:
                return r
        return self.rounds[-1]

    def to_dict(self) -> dict:
        return {
            "rounds": list(self.rounds),
            "mean_acc": [float(v) for v in self.mean],
            "min_acc": [float(v) for v in self.min],
            "max_acc": [float(v) for v in self.max],
            "per_client": [[float(v) for v in row] for row in self.per_client],
        }


@dataclass
class MisleadingReport:
    """Pooled predictions of every client on the test samples of one class.

    ``ratio_top2`` is the count of correct predictions divided by the count of
    the most frequent wrong class; it is ``inf`` when no wrong class occurs
    (``runner_up`` is then ``None``).
    """

    target_class: int
    histogram: np.ndarray
    per_client: np.ndarray
    runner_up: int | None
    ratio_top2: float

    @property
    def probabilities(self) -> np.ndarray:
        return self.histogram / self.histogram.sum()

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "histogram": [int(v) for v in self.histogram],
            "probabilities": [float(v) for v in self.probabilities],
            "per_client": [[int(v) for v in row] for row in self.per_client],
            "runner_up": self.runner_up,
            "ratio_top2": None if math.isinf(self.ratio_top2) else float(self.ratio_top2),
        }


def misleading_report(nets: Sequence[DenseNet], test: Dataset, target_class: int) -> MisleadingReport:
    if not 0 <= target_class < test.n_classes:
        raise InputError(f"target class {target_class} out of range")
    rows = test.features[test.labels == target_class]
    if len(rows) == 0:
        raise InputError(f"no test samples of class {target_class}")
    per_client = np.stack([
        np.bincount(predict(net, rows), minlength=test.n_classes) for net in nets
    ])
    hist = per_client.sum(axis=0)
    others = hist.copy()
    others[target_class] = -1
    runner = int(np.argmax(others))
    if others[runner] <= 0:
        return MisleadingReport(target_class, hist, per_client, None, math.inf)
    return MisleadingReport(target_class, hist, per_client, runner, hist[target_class] / others[runner])


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_series_csv(series: ConvergenceSeries, path) -> None:
    k = series.per_client.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "mean_acc", "min_acc", "max_acc", *(f"client_{i}" for i in range(k))])
        for i, r in enumerate(series.rounds):
            w.writerow([r, _fmt(series.mean[i]), _fmt(series.min[i]), _fmt(series.max[i]),
                        *(_fmt(v) for v in series.per_client[i])])


def read_series_csv(path) -> ConvergenceSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    clients = sorted((c for c in rows[0] if c.startswith("client_")), key=lambda c: int(c[7:]))
    return ConvergenceSeries(
        [int(r["round"]) for r in rows],
        [[float(r[c]) for c in clients] for r in rows],
    )


def write_misleading_csv(report: MisleadingReport, path) -> None:
    n = report.histogram.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", *(f"class_{c}" for c in range(n))])
        w.writerow(["pooled", *(int(v) for v in report.histogram)])
        for i, row in enumerate(report.per_client):
            w.writerow([f"client_{i}", *(int(v) for v in row)])


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n")


def export(obj, path, fmt: str = "csv") -> Path:
    """Write a series or misleading report as ``csv`` or ``json``."""
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown export format {fmt!r}", field="format")
    if fmt == "json":
        write_json(obj if isinstance(obj, dict) else obj.to_dict(), path)
    elif isinstance(obj, ConvergenceSeries):
        write_series_csv(obj, path)
    elif isinstance(obj, MisleadingReport):
        write_misleading_csv(obj, path)
    else:
        raise InputError(f"cannot export {type(obj).__name__} as csv")
    return path
