import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_ids import metrics as M
from hybrid_ids.errors import UndefinedMetricError, UsageError, ValidationError

from . import oracles as O


def _binary_instance(tp, tn, fp, fn):
    y_true = [1] * tp + [0] * tn + [0] * fp + [1] * fn
    y_pred = [1] * tp + [0] * tn + [1] * fp + [0] * fn
    return y_true, y_pred


def test_confusion_identity():
    cm = M.confusion([0, 1, 2], [0, 1, 2], 3)
    assert cm.counts.tolist() == np.eye(3, dtype=int).tolist()
    assert not cm.fp.any() and not cm.fn.any()


def test_confusion_constructed_counts():
    cm = M.confusion(*_binary_instance(50, 40, 5, 5), 2)
    assert (int(cm.tp[1]), int(cm.tn[1]), int(cm.fp[1]), int(cm.fn[1])) == (50, 40, 5, 5)
    assert cm.counts.tolist() == [[40, 5], [5, 50]]


def test_confusion_empty_then_metrics_error():
    cm = M.confusion([], [], 3)
    assert cm.total == 0 and cm.counts.shape == (3, 3)
    with pytest.raises(UndefinedMetricError):
        M.accuracy(cm)
    with pytest.raises(UndefinedMetricError):
        M.f1(cm, "macro")


def test_confusion_label_out_of_range_names_index():
    with pytest.raises(ValidationError, match="2"):
        M.confusion([0, 1, 5], [0, 1, 1], 3)


def test_equations_on_constructed_instance():
    cm = M.confusion(*_binary_instance(50, 40, 5, 5), 2)
    assert M.accuracy(cm) == pytest.approx(0.90, abs=1e-15)
    assert M.precision(cm) == pytest.approx(50 / 55, abs=1e-15)
    assert M.recall(cm) == pytest.approx(50 / 55, abs=1e-15)
    assert M.f1(cm) == pytest.approx(0.90909, abs=1e-5)


def test_perfect_predictions():
    y = [0, 1, 1, 0, 1]
    cm = M.confusion(y, y, 2)
    assert M.accuracy(cm) == M.precision(cm) == M.recall(cm) == M.f1(cm) == 1.0


def test_all_predicted_zero_flags_precision():
    y_true = [0, 1, 1, 0]
    rep = M.metrics_report(y_true, np.zeros((4, 1)), ["Normal", "Attack"])
    assert rep.precision == 0.0
    assert any("precision" in f for f in rep.flags)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 10), st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_metrics_match_counting_oracle(c, n, seed):
    rng = np.random.default_rng(seed)
    y_true = rng.integers(0, c, size=n).tolist()
    y_pred = rng.integers(0, c, size=n).tolist()
    cm = M.confusion(y_true, y_pred, c)
    assert cm.counts.tolist() == O.confusion_counts(y_true, y_pred, c)
    assert abs(M.accuracy(cm) - sum(a == b for a, b in zip(y_true, y_pred)) / n) < 1e-12
    assert abs(M.accuracy(cm) - np.trace(cm.counts) / cm.total) < 1e-12
    p, r, f = O.macro_prf(y_true, y_pred, c)
    assert abs(M.precision(cm, "macro") - p) < 1e-12
    assert abs(M.recall(cm, "macro") - r) < 1e-12
    assert abs(M.f1(cm, "macro") - f) < 1e-12
    for k in range(c):
        tp, fp, fn, tn = O.class_counts(y_true, y_pred, k)
        assert (cm.tp[k], cm.fp[k], cm.fn[k], cm.tn[k]) == (tp, fp, fn, tn)
        assert cm.tp[k] + cm.fn[k] == cm.counts[k].sum()
        assert cm.tp[k] + cm.fp[k] == cm.counts[:, k].sum()
        assert cm.tp[k] + cm.tn[k] + cm.fp[k] + cm.fn[k] == n


def test_binary_mode_requires_two_classes():
    cm = M.confusion([0, 1, 2], [0, 1, 2], 3)
    with pytest.raises(UsageError):
        M.precision(cm, "binary")


def test_macro_f1_is_mean_of_per_class_f1():
    # per-class F1 first, then averaged (not F1 of averaged precision/recall)
    y_true = [0, 0, 0, 1, 1, 2]
    y_pred = [0, 1, 2, 1, 1, 1]
    cm = M.confusion(y_true, y_pred, 3)
    pc = M.per_class(cm)
    assert M.f1(cm, "macro") == pytest.approx(np.mean(pc.f1), abs=1e-15)
    p, r = M.precision(cm, "macro"), M.recall(cm, "macro")
    assert abs(M.f1(cm, "macro") - 2 * p * r / (p + r)) > 1e-3


# ---------------------------------------------------------------------------
# ROC / AUC


def test_roc_hand_sweep():
    curve = M.roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert [(p.fpr, p.tpr) for p in curve] == [(0, 0), (0, 0.5), (0, 1), (0.5, 1), (1, 1)]
    assert curve[0].threshold == float("inf")


def test_roc_perfect_hugs_edges():
    curve = M.roc_curve([5, 4, 3, 2, 1], [1, 1, 1, 0, 0])
    for p in curve:
        assert p.fpr == 0 or p.tpr == 1


def test_roc_constant_scores_two_points():
    curve = M.roc_curve([0.3] * 6, [1, 0, 1, 0, 0, 1])
    assert [(p.fpr, p.tpr) for p in curve] == [(0, 0), (1, 1)]


def test_roc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        M.roc_curve([0.1, 0.2], [1, 1])


def test_roc_rejects_non_finite():
    with pytest.raises(ValidationError):
        M.roc_curve([0.1, np.inf], [0, 1])


def test_auc_anchors():
    s = [0.9, 0.8, 0.3, 0.1]
    assert M.roc_auc(s, [1, 1, 0, 0]) == 1.0
    assert M.roc_auc(s, [0, 0, 1, 1]) == 0.0
    assert M.roc_auc([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_auc_pairwise_example():
    assert M.roc_auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75, abs=1e-15)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 80), st.booleans(), st.integers(0, 2**32 - 1))
def test_auc_equals_pairwise_statistic(n, ties, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 5, size=n).astype(float) if ties else rng.permutation(n) + rng.random(n) * 0.5
    assert abs(M.roc_auc(s, y) - O.pairwise_auc(s.tolist(), y.tolist())) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance_and_flip(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = rng.permutation(n).astype(float) / n  # tie-free
    base = M.roc_auc(s, y)
    assert abs(M.roc_auc(np.exp(s), y) - base) < 1e-12
    assert abs(M.roc_auc(3.0 * s - 7.0, y) - base) < 1e-12
    assert abs(M.roc_auc(s, y) + M.roc_auc(s, 1 - y) - 1.0) < 1e-12


def test_roc_points_sorted_and_anchored():
    rng = np.random.default_rng(3)
    s, y = rng.random(50), rng.integers(0, 2, size=50)
    curve = M.roc_curve(s, y)
    fpr = [p.fpr for p in curve]
    assert fpr == sorted(fpr)
    assert (curve[0].fpr, curve[0].tpr) == (0.0, 0.0) and (curve[-1].fpr, curve[-1].tpr) == (1.0, 1.0)


def test_auc_rejects_bad_curve():
    with pytest.raises(ValidationError):
        M.auc([M.RocPoint(0.0, 0.0, 1.0), M.RocPoint(0.5, 0.5, 0.5)])


# ---------------------------------------------------------------------------
# multiclass AUC and reports


def test_multiclass_auc_one_hot_and_uniform():
    y = np.array([0, 1, 2, 1, 0, 2])
    assert M.multiclass_auc(np.eye(3)[y], y) == 1.0
    assert M.multiclass_auc(np.full((6, 3), 1 / 3), y) == 0.5


def test_multiclass_auc_composition():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 3, size=60)
    proba = rng.dirichlet(np.ones(3), size=60)
    parts = [M.auc(M.roc_curve(proba[:, c], (y == c).astype(int))) for c in range(3)]
    assert abs(M.multiclass_auc(proba, y) - np.mean(parts)) < 1e-12


def test_multiclass_auc_absent_class_flagged():
    y = np.array([0, 1, 0, 1])
    proba = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1]])
    detail = M.multiclass_auc_detail(proba, y)
    assert detail.value == 1.0
    assert any("2" in f for f in detail.flags)


def test_multiclass_auc_needs_two_classes():
    with pytest.raises(UndefinedMetricError):
        M.multiclass_auc(np.full((3, 3), 1 / 3), [1, 1, 1])


def test_report_json_schema_and_ranges():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 10, size=200)
    proba = rng.dirichlet(np.ones(10), size=200)
    rep = M.metrics_report(y, proba)
    d = json.loads(rep.to_json())
    assert list(d) == ["accuracy", "precision", "recall", "f1", "roc_auc", "averaging", "per_class", "flags"]
    assert d["averaging"] == "macro"
    for k in ("accuracy", "precision", "recall", "f1", "roc_auc"):
        assert 0.0 <= d[k] <= 1.0
    assert M.MetricsReport.from_json(rep.to_json()) == rep


def test_report_binary_threshold():
    rep = M.metrics_report([0, 1, 1, 0], np.array([[0.2], [0.5], [0.9], [0.6]]))
    assert rep.averaging == "binary"
    assert rep.accuracy == 0.75 and rep.recall == 1.0


def test_reported_headline_f1_is_not_harmonic_mean():
    # Reported headline cells: precision 98.46, recall 97.10, F1 98.66.
    # The harmonic mean of the first two is 97.78, so the third cell cannot
    # come from the F1 definition; we compute F1 strictly and do not match it.
    p, r = 0.9846, 0.9710
    assert abs(2 * p * r / (p + r) - 0.97775) < 5e-5
    assert abs(2 * p * r / (p + r) - 0.9866) > 8e-3
    # One reported epoch row has F1 98.66 above both precision and recall,
    # which the harmonic mean never allows.
    p, r = 0.9674, 0.9599
    assert 2 * p * r / (p + r) <= max(p, r) < 0.9866
