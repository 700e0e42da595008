"""Classification metrics: confusion matrix, accuracy and UAR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyClass


@dataclass
class Metrics:
    accuracy: float
    uar: float
    confusion: np.ndarray  # rows = true class
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "uar": self.uar, "n": self.n, "confusion": self.confusion.tolist()}


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def uar(confusion) -> float:
    """Mean per-class recall; every class must have at least one item."""
    cm = np.asarray(confusion, dtype=np.float64)
    rows = cm.sum(axis=1)
    if (rows == 0).any():
        raise EmptyClass(f"classes {np.flatnonzero(rows == 0).tolist()} have no items")
    return float(np.mean(np.diag(cm) / rows))


def metrics_from_predictions(y_true, y_pred, num_classes: int) -> Metrics:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    n = int(cm.sum())
    acc = float(np.trace(cm) / n) if n else 0.0
    present = cm.sum(axis=1) > 0
    u = float(np.mean(np.diag(cm)[present] / cm.sum(axis=1)[present])) if n else 0.0
    return Metrics(acc, u, cm, n)
