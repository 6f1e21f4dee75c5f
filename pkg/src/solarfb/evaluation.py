"""Classification and pixel-detection metrics.

Patch classification is scored with confusion counts and IoU =
TP/(TP+FP+FN), with an exhaustive threshold sweep over the observed
scores. Pixel detection pools all map/mask pixels into one ROC swept
over 256 uniform threshold levels and integrates AUC trapezoidally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .activation_maps import ActivationMap

ROC_LEVELS = 256


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def tp_rate(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def tn_rate(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0


def confusion(predictions, labels) -> ConfusionCounts:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(
            f"predictions ({pred.shape}) and labels ({lab.shape}) differ in length"
        )
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (lab == 1))),
        fp=int(np.sum((pred == 1) & (lab == 0))),
        tn=int(np.sum((pred == 0) & (lab == 0))),
        fn=int(np.sum((pred == 0) & (lab == 1))),
    )


def iou_from_counts(c: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); the degenerate zero-denominator case is 0.0."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 0.0
    return c.tp / denom


@dataclass
class SweepResult:
    best_threshold: float
    best_iou: float
    curve: list[tuple[float, float]]  # (threshold, iou)


def threshold_sweep(scores, labels) -> SweepResult:
    """IoU at every distinct score plus {0, 1}; ties go to the larger threshold."""
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels)
    if s.size == 0:
        raise ValueError("threshold sweep needs at least one score")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    candidates = np.unique(np.concatenate([s, [0.0, 1.0]]))
    n_pos = int(np.sum(lab == 1))
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    lab_sorted = lab[order]
    # cumulative positives/negatives with score < t, for every candidate
    pos_below = np.searchsorted(s_sorted, candidates, side="left")
    cum_pos = np.concatenate([[0], np.cumsum(lab_sorted == 1)])
    cum_neg = np.concatenate([[0], np.cumsum(lab_sorted == 0)])
    curve = []
    best_t, best_iou = 0.0, -1.0
    for t, k in zip(candidates, pos_below):
        fn = int(cum_pos[k])          # positives scored below t -> predicted negative
        tp = n_pos - fn
        fp = int(cum_neg[-1] - cum_neg[k])  # negatives scored >= t
        denom = tp + fp + fn
        iou = tp / denom if denom else 0.0
        curve.append((float(t), iou))
        if iou >= best_iou:
            best_t, best_iou = float(t), iou
    return SweepResult(best_threshold=best_t, best_iou=best_iou, curve=curve)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    points: list[tuple[float, float]]  # (fpr, tpr), ordered by increasing threshold
    auc: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, (fpr, tpr) in zip(self.thresholds, self.points):
                w.writerow([f"{t:.10g}", f"{fpr:.10g}", f"{tpr:.10g}"])


def _map_values(m) -> np.ndarray:
    return m.values if isinstance(m, ActivationMap) else np.asarray(m)


def roc_auc(maps, truths, levels: int = ROC_LEVELS) -> RocCurve:
    """Pooled-pixel ROC of activation maps in [0,1] against binary masks."""
    pooled_v, pooled_t = [], []
    for m, truth in zip(maps, truths, strict=True):
        v = _map_values(m)
        t = np.asarray(truth)
        if v.shape != t.shape:
            raise ValueError(f"map shape {v.shape} != mask shape {t.shape}")
        pooled_v.append(v.ravel())
        pooled_t.append(t.ravel().astype(bool))
    values = np.concatenate(pooled_v).astype(np.float64)
    truth = np.concatenate(pooled_t)
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("maps must be normalized to [0, 1] before ROC")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"ROC undefined: pooled truth has {n_pos} positive and {n_neg} "
            "negative pixels"
        )
    grid = np.linspace(0.0, 1.0, levels)
    # bin index i = largest grid level <= value; value >= grid[j] iff i >= j
    idx = np.searchsorted(grid, values, side="right") - 1
    pos_counts = np.bincount(idx[truth], minlength=levels)
    neg_counts = np.bincount(idx[~truth], minlength=levels)
    tpr = np.cumsum(pos_counts[::-1])[::-1] / n_pos
    fpr = np.cumsum(neg_counts[::-1])[::-1] / n_neg
    # sentinel above 1.0 pins the (0,0) endpoint
    thresholds = np.concatenate([grid, [np.nextafter(1.0, 2.0)]])
    tpr = np.concatenate([tpr, [0.0]])
    fpr = np.concatenate([fpr, [0.0]])
    auc = float(np.trapezoid(tpr[::-1], fpr[::-1]))
    points = list(zip(fpr.tolist(), tpr.tolist()))
    return RocCurve(thresholds=thresholds, points=points, auc=auc)


def common_tp_set(predictions_by_model: dict, labels) -> np.ndarray:
    """Indices of positive samples classified positive by every model."""
    lab = np.asarray(labels)
    keep = lab == 1
    for name, preds in predictions_by_model.items():
        p = np.asarray(preds)
        if p.shape != lab.shape:
            raise ValueError(
                f"predictions for {name!r} have shape {p.shape}, labels {lab.shape}"
            )
        keep &= p == 1
    return np.flatnonzero(keep)
