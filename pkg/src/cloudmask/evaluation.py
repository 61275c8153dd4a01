"""Accuracy metrics: confusion counts, overall accuracy, Cohen's kappa, per-position grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, ShapeError

THRESHOLD = 0.5


def classify(probabilities, threshold: float = THRESHOLD) -> np.ndarray:
    """1 where ``p >= threshold`` (ties count as cloud), else 0."""
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


@dataclass
class EvalReport:
    tn: int
    fp: int
    fn: int
    tp: int
    oa: float
    kappa: float
    grid: Optional[np.ndarray] = None
    timing: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def to_dict(self) -> dict:
        d = {"confusion": {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp},
             "oa": self.oa, "kappa": self.kappa}
        if self.grid is not None:
            d["grid"] = [float(v) for v in np.asarray(self.grid).ravel()]
        if self.timing is not None:
            d["timing"] = dict(self.timing)
        d.update(self.extra)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def kappa_from_counts(tn: int, fp: int, fn: int, tp: int) -> tuple[float, float]:
    """Return ``(oa, kappa)``; kappa is 0 when chance agreement is 1."""
    total = tn + fp + fn + tp
    po = (tp + tn) / total
    pred_pos = (tp + fp) / total
    true_pos = (tp + fn) / total
    pe = pred_pos * true_pos + (1.0 - pred_pos) * (1.0 - true_pos)
    if pe >= 1.0:
        return po, 0.0
    return po, (po - pe) / (1.0 - pe)


def compute_metrics(predicted, actual) -> EvalReport:
    predicted = np.asarray(predicted).ravel()
    actual = np.asarray(actual).ravel()
    if predicted.shape != actual.shape:
        raise ShapeError(f"{predicted.size} predictions vs {actual.size} truth labels")
    if predicted.size == 0:
        raise DataError("no samples to evaluate")
    p = predicted.astype(bool)
    a = actual.astype(bool)
    tp = int(np.sum(p & a))
    tn = int(np.sum(~p & ~a))
    fp = int(np.sum(p & ~a))
    fn = int(np.sum(~p & a))
    oa, kappa = kappa_from_counts(tn, fp, fn, tp)
    return EvalReport(tn, fp, fn, tp, oa, kappa)


def position_grid(predicted_patches, actual_patches) -> np.ndarray:
    """Fraction of patches whose prediction matches the truth, per output cell."""
    pred = np.asarray(predicted_patches)
    act = np.asarray(actual_patches)
    if pred.shape != act.shape:
        raise ShapeError(f"prediction patches {pred.shape} vs truth patches {act.shape}")
    if pred.ndim != 3 or pred.shape[1:] != (9, 9) or len(pred) == 0:
        raise ShapeError(f"expected a non-empty (n, 9, 9) stack, got {pred.shape}")
    return np.mean(pred.astype(bool) == act.astype(bool), axis=0)


def masked_metrics(predicted_mask: np.ndarray, truth_labels: np.ndarray, ignore: int = 255) -> EvalReport:
    """Metrics over pixels where neither map carries the ``ignore`` value."""
    if predicted_mask.shape != truth_labels.shape:
        raise ShapeError(f"mask {predicted_mask.shape} vs truth {truth_labels.shape}")
    keep = (predicted_mask != ignore) & (truth_labels != ignore)
    return compute_metrics(predicted_mask[keep], truth_labels[keep])
