"""Confusion matrices and macro-averaged classification scores."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, LabelIndexError


def confusion(y_true, y_pred, k: int) -> np.ndarray:
    """k x k count matrix, rows = true class, columns = predicted class."""
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise DimensionError(f"{t.size} true labels vs {p.size} predictions")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelIndexError(f"label outside [0, {k}) in confusion input")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 -> 0, the convention scikit-learn uses when zero_division=0
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _ratio(tp, cm.sum(axis=1).astype(np.float64))
    f = _ratio(2 * precision * recall, precision + recall)
    return precision, recall, f


def macro_metrics(cm) -> tuple[float, float, float]:
    """(MAF, MAP, accuracy) as fractions in [0, 1]."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise DataError("cannot score an empty confusion matrix")
    precision, _, f = per_class(cm)
    return float(f.mean()), float(precision.mean()), float(np.trace(cm) / total)


@dataclass
class TaskReport:
    labels: list[str]
    confusion: np.ndarray
    maf: float
    map: float
    accuracy: float

    @classmethod
    def from_predictions(cls, labels, y_true, y_pred) -> "TaskReport":
        cm = confusion(y_true, y_pred, len(labels))
        maf, map_, acc = macro_metrics(cm)
        return cls(list(labels), cm, 100 * maf, 100 * map_, 100 * acc)

    def to_dict(self) -> dict:
        return {"labels": self.labels, "confusion": self.confusion.tolist(),
                "MAF": self.maf, "MAP": self.map, "accuracy": self.accuracy}


@dataclass
class EvalReport:
    """Per-task scores, reported as percentages."""

    tasks: dict[str, TaskReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: t.to_dict() for name, t in self.tasks.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def format_table(rows: dict[str, EvalReport], task: str = "emotion") -> str:
    """Text table with one row per system and MAF/MAP/Accuracy columns."""
    width = max([len("Approach")] + [len(name) for name in rows])
    lines = [f"{'Approach':<{width}}  {'MAF':>6}  {'MAP':>6}  {'Accuracy':>8}"]
    lines.append("-" * len(lines[0]))
    for name, report in rows.items():
        t = report.tasks[task]
        lines.append(f"{name:<{width}}  {t.maf:>6.1f}  {t.map:>6.1f}  {t.accuracy:>8.1f}")
    return "\n".join(lines) + "\n"
