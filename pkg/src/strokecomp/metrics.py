"""Confusion matrices, support-weighted precision/recall/F1, and report tables."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .skeleton import Label

log = logging.getLogger(__name__)

CLASS_NAMES = tuple(lab.name for lab in Label)
COLUMNS = ("accuracy", "precision", "recall", "f1")


def confusion(y_true, y_pred, n_classes: int = len(Label)) -> np.ndarray:
    """counts[i, j] = number of samples with true class i predicted as j."""
    y_true = np.asarray([int(v) for v in y_true], dtype=np.int64)
    y_pred = np.asarray([int(v) for v in y_pred], dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    if y_true.size == 0:
        raise ValueError("confusion matrix of zero samples")
    if min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes:
        raise ValueError(f"labels must be class codes in 0..{n_classes - 1}")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes ** 2).reshape(n_classes, n_classes)


class ClassMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: list[ClassMetrics]
    confusion: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def row(self) -> tuple[float, float, float, float]:
        return self.accuracy, self.precision, self.recall, self.f1

    def to_dict(self) -> dict:
        return {
            **dict(zip(COLUMNS, self.row())),
            "per_class": {name: c._asdict() for name, c in zip(self.class_names, self.per_class)},
            "confusion": self.confusion.tolist(),
        }


def _ratio(num, den, what, k, warned):
    if den == 0:
        warned.append(f"{what} of class {k}")
        return 0.0
    return num / den


def compute_metrics(cm, average: str = "weighted", class_names: Sequence[str] | None = None) -> MetricsReport:
    """Per-class precision/recall/F1 from a confusion matrix and their aggregate.

    ``average="weighted"`` weights each class by its support, which makes the
    aggregate recall identical to accuracy. ``average="binary"`` reports class 1
    as the positive class of a 2x2 matrix. Undefined ratios (0/0) count as 0.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or np.any(cm < 0):
        raise ValueError("confusion matrix must be square with non-negative counts")
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    k = len(cm)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    warned: list[str] = []
    per_class = []
    for c in range(k):
        p = _ratio(tp[c], predicted[c], "precision", c, warned)
        r = _ratio(tp[c], support[c], "recall", c, warned)
        f = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
        per_class.append(ClassMetrics(p, r, f, int(support[c])))
    if warned:
        log.warning("undefined metrics set to 0: %s", ", ".join(warned))
    accuracy = float(tp.sum() / total)
    if average == "weighted":
        w = support / total
        agg = [float(np.dot(w, [pc[j] for pc in per_class])) for j in range(3)]
        # sum_k (n_k / N) * (tp_k / n_k) is trace / N; avoid a rounding gap from summing the terms
        agg[1] = accuracy
    elif average == "binary":
        if k != 2:
            raise ValueError("binary averaging needs a 2x2 matrix")
        agg = list(per_class[1][:3])
    else:
        raise ValueError(f"unknown averaging {average!r}")
    if class_names is None:
        class_names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(c) for c in range(k))
    return MetricsReport(accuracy, agg[0], agg[1], agg[2], per_class, cm.copy(), tuple(class_names))


def evaluate(y_true, y_pred) -> MetricsReport:
    return compute_metrics(confusion(y_true, y_pred))


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average of several runs' metrics (each metric averaged separately); confusion counts are summed."""
    if not reports:
        raise ValueError("nothing to average")
    m = lambda vals: float(np.mean(vals))
    per_class = [ClassMetrics(m([r.per_class[c].precision for r in reports]),
                              m([r.per_class[c].recall for r in reports]),
                              m([r.per_class[c].f1 for r in reports]),
                              int(sum(r.per_class[c].support for r in reports)))
                 for c in range(len(reports[0].per_class))]
    return MetricsReport(m([r.accuracy for r in reports]), m([r.precision for r in reports]),
                         m([r.recall for r in reports]), m([r.f1 for r in reports]),
                         per_class, sum(r.confusion for r in reports), reports[0].class_names)


@dataclass
class RenderedReport:
    text: str
    csv: str
    json: str
    extra: dict = field(default_factory=dict)

    def get(self, fmt: str) -> str:
        if fmt not in ("text", "csv", "json"):
            raise ValueError(f"unknown report format {fmt!r}")
        return getattr(self, fmt)


def render_report(reports: Mapping[str, MetricsReport], extra: dict | None = None) -> RenderedReport:
    """Rows in mapping order. Text shows 4 decimals; CSV and JSON keep full precision."""
    if not reports:
        raise ValueError("no reports to render")
    width = max(len("Model"), *(len(name) for name in reports))
    lines = [f"{'Model':<{width}} Accuracy Precision Recall F1-score"]
    for name, r in reports.items():
        lines.append(f"{name:<{width}} " + " ".join(f"{v:.4f}" for v in r.row()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + COLUMNS)
    for name, r in reports.items():
        w.writerow((name,) + tuple(repr(float(v)) for v in r.row()))
    payload = {"models": [{"model": name, **r.to_dict()} for name, r in reports.items()]}
    if extra:
        payload.update(extra)
    return RenderedReport("\n".join(lines) + "\n", buf.getvalue(),
                          json.dumps(payload, indent=2) + "\n", extra or {})
