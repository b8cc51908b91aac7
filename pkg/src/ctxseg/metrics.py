"""Confusion counts and F1 pooled over repeated runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class TP, FP, FN. Floats, because run averages are fractional."""

    tp: tuple
    fp: tuple
    fn: tuple

    def __post_init__(self):
        arrs = [np.asarray(v, dtype=np.float64) for v in (self.tp, self.fp, self.fn)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("tp, fp and fn must be 1-D and of equal length")
        for name, a in zip(("tp", "fp", "fn"), arrs):
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} counts must be finite and non-negative, got {a.tolist()}")
        object.__setattr__(self, "tp", tuple(float(v) for v in arrs[0]))
        object.__setattr__(self, "fp", tuple(float(v) for v in arrs[1]))
        object.__setattr__(self, "fn", tuple(float(v) for v in arrs[2]))

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    def f1(self) -> np.ndarray:
        tp, fp, fn = (np.asarray(v) for v in (self.tp, self.fp, self.fn))
        den = 2 * tp + fp + fn
        return np.divide(2 * tp, den, out=np.zeros_like(den), where=den > 0)

    def to_json(self) -> dict:
        return {"tp": list(self.tp), "fp": list(self.fp), "fn": list(self.fn)}

    @classmethod
    def from_json(cls, d) -> "ConfusionCounts":
        return cls(tuple(d["tp"]), tuple(d["fp"]), tuple(d["fn"]))


def confusion_counts(y_true, y_pred, n_classes: int) -> ConfusionCounts:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    cm = np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes)
    cm = cm.reshape(n_classes, n_classes)
    tp = np.diag(cm)
    return ConfusionCounts(tuple(tp), tuple(cm.sum(axis=0) - tp), tuple(cm.sum(axis=1) - tp))


def mean_counts(runs: Sequence[ConfusionCounts]) -> ConfusionCounts:
    if not runs:
        raise ValueError("need at least one run")
    n = {r.n_classes for r in runs}
    if len(n) != 1:
        raise ValueError(f"runs disagree on the number of classes: {sorted(n)}")
    tp = np.mean([r.tp for r in runs], axis=0)
    fp = np.mean([r.fp for r in runs], axis=0)
    fn = np.mean([r.fn for r in runs], axis=0)
    return ConfusionCounts(tuple(tp), tuple(fp), tuple(fn))


def f1_from_runs(runs: Sequence[ConfusionCounts]) -> np.ndarray:
    """F1 per class from TP/FP/FN averaged over ``runs`` (not the mean of per-run F1)."""
    return mean_counts(runs).f1()


def f1_scores(y_true, y_pred, n_classes: int) -> np.ndarray:
    return confusion_counts(y_true, y_pred, n_classes).f1()
