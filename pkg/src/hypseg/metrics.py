"""Confusion matrices, macro-averaged precision/recall/F1 and fold aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


def confusion(pred, truth, n_classes: int, out: np.ndarray | None = None) -> np.ndarray:
    """K×K counts, row = true class, column = predicted class.

    Pass ``out`` to accumulate across scenes.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p, t = pred.ravel().astype(np.int64), truth.ravel().astype(np.int64)
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    if out is not None:
        out += cm
        return out
    return cm


def row_normalized(cm: np.ndarray) -> np.ndarray:
    """Row percentages as displayed in confusion-matrix figures (empty rows stay 0)."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, rows, out=np.zeros_like(cm), where=rows > 0)


def _safe_div(num, den):
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    confusion: list[list[int]] | None = None
    folds: list[dict] | None = None
    std: dict | None = None
    std_kind: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def macro_metrics(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ValueError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix holds no soundings")
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=cm.astype(np.int64).tolist(),
    )


def macro_f1(pred, truth, n_classes: int) -> float:
    return macro_metrics(confusion(pred, truth, n_classes)).macro_f1


def aggregate_folds(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and population standard deviation (divide by k) of each metric."""
    if not reports:
        raise ValueError("no fold reports to aggregate")
    vals = {m: np.array([getattr(r, m) for r in reports]) for m in METRIC_NAMES}
    per_class = {m: np.array([getattr(r, m) for r in reports]) for m in ("precision", "recall", "f1")}
    return MetricsReport(
        **{m: float(v.mean()) for m, v in vals.items()},
        **{m: v.mean(axis=0).tolist() for m, v in per_class.items()},
        folds=[{m: getattr(r, m) for m in METRIC_NAMES} for r in reports],
        std={m: float(v.std()) for m, v in vals.items()},
        std_kind="population",
    )
