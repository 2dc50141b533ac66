"""Classification metrics, neighbour-count Gini coefficient and report I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np

from .errors import DataError


def confusion_matrix(pred, truth, C: int) -> np.ndarray:
    """C x C counts; rows are true classes, columns predicted classes."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise DataError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= C):
        raise DataError(f"class index outside 0..{C - 1}")
    return np.bincount(truth * C + pred, minlength=C * C).reshape(C, C)


@dataclass
class ClassMetrics:
    name: str
    support: int
    predicted: int
    recall: float
    precision: float
    f1: float
    recall_undefined: bool = False
    precision_undefined: bool = False
    f1_undefined: bool = False


@dataclass
class EvalReport:
    classes: list[str]
    per_class: list[ClassMetrics]
    accuracy: float
    weighted_recall: float
    weighted_precision: float
    weighted_f1: float
    confusion: list[list[int]]
    total: int
    gini: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        obj["per_class"] = [ClassMetrics(**c) for c in obj["per_class"]]
        return cls(**obj)

    def to_table(self) -> str:
        width = max(12, *(len(c) for c in self.classes))
        lines = [f"{'class':<{width}} {'support':>8} {'recall':>8} {'precision':>9} {'f1':>8}"]
        for c in self.per_class:
            flag = "*" if (c.recall_undefined or c.precision_undefined or c.f1_undefined) else " "
            lines.append(
                f"{c.name:<{width}} {c.support:>8d} {c.recall:>8.4f} {c.precision:>9.4f} {c.f1:>8.4f}{flag}"
            )
        lines.append("")
        lines.append(f"{'accuracy':<{width}} {self.accuracy:.4f}")
        lines.append(f"{'weighted recall':<{width}} {self.weighted_recall:.4f}")
        lines.append(f"{'weighted precision':<{width}} {self.weighted_precision:.4f}")
        lines.append(f"{'weighted f1':<{width}} {self.weighted_f1:.4f}")
        if self.gini is not None:
            lines.append(f"{'gini':<{width}} {self.gini:.4f}")
        lines.append(f"{'samples':<{width}} {self.total}")
        if any(c.recall_undefined or c.precision_undefined or c.f1_undefined for c in self.per_class):
            lines.append("* undefined metric reported as 0")
        return "\n".join(lines) + "\n"

    def write_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["class", "support", "predicted", "recall", "precision", "f1"])
        for c in self.per_class:
            w.writerow([c.name, c.support, c.predicted, repr(c.recall), repr(c.precision), repr(c.f1)])


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def classification_metrics(cm, classes: Sequence[str] | None = None) -> EvalReport:
    """One-vs-rest recall/precision/F1 per class, accuracy and support-weighted means.

    A zero denominator yields 0 with the matching ``*_undefined`` flag set.
    """
    cm = np.asarray(cm, dtype=np.int64)
    C = cm.shape[0]
    if cm.shape != (C, C):
        raise DataError("confusion matrix must be square")
    total = int(cm.sum())
    if total == 0:
        raise DataError("no samples")
    classes = list(classes) if classes is not None else [str(c) for c in range(C)]
    per_class = []
    for c in range(C):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        predicted = int(cm[:, c].sum())
        recall, r_undef = _ratio(tp, support)
        precision, p_undef = _ratio(tp, predicted)
        f1, f_undef = _ratio(2 * recall * precision, recall + precision)
        per_class.append(
            ClassMetrics(classes[c], support, predicted, recall, precision, f1, r_undef, p_undef, f_undef)
        )
    support = np.array([m.support for m in per_class], dtype=np.float64)

    def weighted(attr):
        return float(np.dot(support, [getattr(m, attr) for m in per_class]) / total)

    return EvalReport(
        classes=classes,
        per_class=per_class,
        accuracy=float(np.trace(cm)) / total,
        weighted_recall=weighted("recall"),
        weighted_precision=weighted("precision"),
        weighted_f1=weighted("f1"),
        confusion=cm.tolist(),
        total=total,
    )


def evaluate(pred, truth, classes: Sequence[str]) -> EvalReport:
    return classification_metrics(confusion_matrix(pred, truth, len(classes)), classes)


def lorenz_curve(degrees) -> tuple[np.ndarray, np.ndarray]:
    """Population share and cumulative degree share, both starting at 0."""
    d = np.sort(np.asarray(degrees, dtype=np.float64))
    if d.size == 0:
        raise DataError("empty degree vector")
    if np.any(d < 0):
        raise DataError("negative degree")
    total = d.sum()
    if total == 0:
        raise DataError("degenerate graph: all degrees are zero")
    x = np.arange(d.size + 1) / d.size
    y = np.concatenate([[0.0], np.cumsum(d) / total])
    return x, y


def gini_coefficient(degrees) -> float:
    """Gini coefficient of a degree vector from the exact Lorenz polyline.

    The area under the polyline (trapezoids) is ``S_B``; the area between the
    diagonal and the polyline is ``0.5 - S_B``; ``G = S_A / (S_A + S_B)``.
    """
    x, y = lorenz_curve(degrees)
    area_below = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    area_between = 0.5 - area_below
    return max(0.0, area_between / 0.5)


def write_embeddings(stream: IO[str], embeddings: np.ndarray, true_labels: Sequence[str],
                     pred_labels: Sequence[str]) -> None:
    n, width = embeddings.shape
    if not (len(true_labels) == len(pred_labels) == n):
        raise DataError("label count does not match embedding rows")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["node", "true_label", "pred_label"] + [f"e{k}" for k in range(width)])
    for i in range(n):
        w.writerow([i, true_labels[i], pred_labels[i]] + [repr(float(v)) for v in embeddings[i]])


def export_embeddings(model, graph, features, path, label_space, truth=None) -> np.ndarray:
    """Write final hidden-layer vectors with true and predicted labels to CSV."""
    from .engine import forward

    cache = forward(model, graph, features, train=False)
    hidden = cache.hidden
    pred = np.argmax(cache.logits, axis=1)
    names = label_space.classes
    true_names = [names[t] for t in truth] if truth is not None else [""] * graph.n
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_embeddings(fh, hidden, true_names, [names[p] for p in pred])
    except OSError as exc:
        raise DataError(f"cannot write embeddings to {path}: {exc}") from None
    return hidden
