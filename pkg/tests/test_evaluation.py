"""Tests for the classification and detection metrics."""

import csv

import numpy as np
import pytest
from scipy.stats import rankdata

from solarfb.evaluation import (
    ConfusionCounts,
    common_tp_set,
    confusion,
    iou_from_counts,
    roc_auc,
    threshold_sweep,
)


def test_confusion_counts():
    preds = np.array([1, 1, 0, 0, 1, 0])
    labels = np.array([1, 0, 0, 1, 1, 0])
    c = confusion(preds, labels)
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 2, 1)
    assert c.total == 6
    assert abs(c.tp_rate - 2 / 3) < 1e-12
    assert abs(c.tn_rate - 2 / 3) < 1e-12


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        confusion(np.zeros(3), np.zeros(4))


def test_rates_degenerate_to_zero():
    c = ConfusionCounts(tp=0, fp=0, tn=0, fn=0)
    assert c.tp_rate == 0.0
    assert c.tn_rate == 0.0


def test_iou_published_counts():
    # 88 / (88 + 52 + 17) = 0.560509...
    assert abs(iou_from_counts(ConfusionCounts(88, 52, 0, 17)) - 0.5605) < 5e-5


def test_iou_zero_denominator():
    assert iou_from_counts(ConfusionCounts(0, 0, 10, 0)) == 0.0


def _sweep_oracle(scores, labels):
    candidates = np.unique(np.concatenate([scores, [0.0, 1.0]]))
    best_t, best_iou = 0.0, -1.0
    curve = []
    for t in candidates:
        preds = (scores >= t).astype(int)
        iou = iou_from_counts(confusion(preds, labels))
        curve.append((t, iou))
        if iou >= best_iou:
            best_t, best_iou = t, iou
    return best_t, best_iou, curve


def test_threshold_sweep_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(5, 200))
        scores = rng.random(n).round(2)  # force ties
        labels = rng.integers(0, 2, size=n)
        result = threshold_sweep(scores, labels)
        t_ref, iou_ref, curve_ref = _sweep_oracle(scores, labels)
        assert result.best_iou == pytest.approx(iou_ref, abs=1e-12)
        assert result.best_threshold == pytest.approx(t_ref, abs=1e-12)
        for (t_a, iou_a), (t_b, iou_b) in zip(result.curve, curve_ref):
            assert t_a == t_b
            assert iou_a == pytest.approx(iou_b, abs=1e-12)


def test_threshold_sweep_separable_scores():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    labels = np.array([1, 1, 0, 0])
    result = threshold_sweep(scores, labels)
    assert result.best_iou == 1.0
    assert result.best_threshold == 0.8


def test_threshold_sweep_validation():
    with pytest.raises(ValueError, match="at least one"):
        threshold_sweep(np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError, match="0, 1"):
        threshold_sweep(np.array([1.5]), np.array([1]))


def _rank_auc(values, truth):
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(equal)."""
    ranks = rankdata(values)
    n_pos = truth.sum()
    n_neg = truth.size - n_pos
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def test_roc_auc_matches_rank_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        h = int(rng.integers(4, 20))
        truth = rng.random((h, h)) < 0.3
        if truth.all() or not truth.any():
            continue
        values = np.clip(rng.random((h, h)) + 0.3 * truth, 0.0, 1.0)
        curve = roc_auc([values], [truth])
        ref = _rank_auc(values.ravel(), truth.ravel())
        assert abs(curve.auc - ref) < 1.0 / 256.0


def test_roc_auc_pools_across_maps():
    rng = np.random.default_rng(2)
    maps = [rng.random((6, 6)) for _ in range(5)]
    truths = [rng.random((6, 6)) < 0.4 for _ in range(5)]
    curve = roc_auc(maps, truths)
    pooled = roc_auc([np.concatenate([m.ravel() for m in maps]).reshape(1, -1)],
                     [np.concatenate([t.ravel() for t in truths]).reshape(1, -1)])
    assert curve.auc == pooled.auc


def test_roc_auc_perfect_map_is_exactly_one():
    truth = np.zeros((8, 8), dtype=bool)
    truth[2:5, 2:5] = True
    values = truth.astype(np.float64)
    assert roc_auc([values], [truth]).auc == 1.0


def test_roc_auc_constant_map_is_exactly_half():
    truth = np.zeros((8, 8), dtype=bool)
    truth[0, :3] = True
    values = np.full((8, 8), 0.5)
    assert roc_auc([values], [truth]).auc == 0.5


def test_roc_auc_complement_symmetry():
    rng = np.random.default_rng(3)
    truth = rng.random((16, 16)) < 0.25
    values = rng.random((16, 16))
    a = roc_auc([values], [truth]).auc
    b = roc_auc([1.0 - values], [truth]).auc
    assert abs(a + b - 1.0) < 2.0 / 256.0


def test_roc_auc_validation():
    truth = np.zeros((4, 4), dtype=bool)
    truth[0, 0] = True
    with pytest.raises(ValueError, match="normalized"):
        roc_auc([np.full((4, 4), 1.5)], [truth])
    with pytest.raises(ValueError, match="ROC undefined"):
        roc_auc([np.zeros((4, 4))], [np.zeros((4, 4), dtype=bool)])
    with pytest.raises(ValueError, match="shape"):
        roc_auc([np.zeros((4, 4))], [np.zeros((5, 5), dtype=bool)])


def test_roc_curve_endpoints_and_monotonicity():
    rng = np.random.default_rng(4)
    truth = rng.random((10, 10)) < 0.3
    values = rng.random((10, 10))
    curve = roc_auc([values], [truth])
    fprs = [p[0] for p in curve.points]
    tprs = [p[1] for p in curve.points]
    assert (fprs[0], tprs[0]) == (1.0, 1.0)  # threshold 0 predicts everything
    assert (fprs[-1], tprs[-1]) == (0.0, 0.0)  # sentinel above max value
    assert all(a >= b for a, b in zip(fprs, fprs[1:]))
    assert all(a >= b for a, b in zip(tprs, tprs[1:]))


def test_roc_curve_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    truth = rng.random((8, 8)) < 0.5
    curve = roc_auc([rng.random((8, 8))], [truth])
    path = tmp_path / "roc.csv"
    curve.write_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["threshold", "fpr", "tpr"]
    assert len(rows) - 1 == len(curve.points)
    assert float(rows[1][1]) == curve.points[0][0]


def test_common_tp_set_intersection():
    labels = np.array([1, 1, 1, 0, 1, 0])
    preds = {
        "a": np.array([1, 1, 0, 1, 1, 0]),
        "b": np.array([1, 0, 1, 1, 1, 1]),
    }
    assert list(common_tp_set(preds, labels)) == [0, 4]
    with pytest.raises(ValueError, match="shape"):
        common_tp_set({"a": np.zeros(3)}, labels)
