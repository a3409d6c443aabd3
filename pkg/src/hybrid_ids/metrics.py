"""Confusion-matrix metrics, ROC curves and AUC.

Per class ``c`` of a confusion matrix (rows = true, columns = predicted):

* ``tp = counts[c, c]``
* ``fp = column_sum(c) - tp``
* ``fn = row_sum(c) - tp``
* ``tn = total - tp - fp - fn``

accuracy  = (tp + tn) / (tp + tn + fp + fn)   (equals trace / total)
precision = tp / (tp + fp)
recall    = tp / (tp + fn)
f1        = 2 * precision * recall / (precision + recall)

``averaging="binary"`` reports class 1 of a two-class matrix; ``"macro"``
takes the unweighted mean of the per-class values. F1 is always formed per
class first and averaged afterwards. A per-class 0/0 is reported as 0 and
named in the flags.

ROC-AUC is the trapezoidal integral of TPR over FPR. It agrees with the
Mann-Whitney pairwise statistic (ties counted as one half) because tied
scores share a single threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import UndefinedMetricError, UsageError, ValidationError

AVERAGING = ("binary", "macro")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn


def _labels(y, name: str) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ValidationError(f"{name} must hold integer class labels")
    return arr.astype(np.int64)


def confusion(y_true, y_pred, n_classes: int) -> ConfusionMatrix:
    t = _labels(y_true, "y_true")
    p = _labels(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ValidationError(f"y_true has {t.size} labels but y_pred has {p.size}")
    if n_classes < 1:
        raise ValidationError(f"need at least one class, got {n_classes}")
    for name, arr in (("y_true", t), ("y_pred", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= n_classes))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(f"{name}[{i}] = {arr[i]} is outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _require_counts(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise UndefinedMetricError("metrics are undefined on an empty confusion matrix")


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = den == 0
    out = np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=~zero)
    return out, zero


@dataclass
class PerClass:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    flags: list[str] = field(default_factory=list)


def per_class(cm: ConfusionMatrix) -> PerClass:
    _require_counts(cm)
    tp, fp, fn = cm.tp.astype(np.float64), cm.fp, cm.fn
    prec, p0 = _ratio(tp, tp + fp)
    rec, r0 = _ratio(tp, tp + fn)
    f1, f0 = _ratio(2.0 * prec * rec, prec + rec)
    flags = []
    for name, mask in (("precision", p0), ("recall", r0), ("f1", f0)):
        flags.extend(f"{name}[{c}] is 0/0, reported as 0" for c in np.flatnonzero(mask))
    return PerClass(prec, rec, f1, flags)


def _reduce(values: np.ndarray, cm: ConfusionMatrix, avg: str) -> float:
    if avg == "binary":
        if cm.n_classes != 2:
            raise UsageError(f"binary averaging needs a 2-class matrix, got {cm.n_classes} classes")
        return float(values[1])
    if avg == "macro":
        return float(np.mean(values))
    raise UsageError(f"unknown averaging {avg!r}; expected one of {AVERAGING}")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_counts(cm)
    return float(np.trace(cm.counts) / cm.total)


def precision(cm: ConfusionMatrix, avg: str = "binary") -> float:
    return _reduce(per_class(cm).precision, cm, avg)


def recall(cm: ConfusionMatrix, avg: str = "binary") -> float:
    return _reduce(per_class(cm).recall, cm, avg)


def f1(cm: ConfusionMatrix, avg: str = "binary") -> float:
    return _reduce(per_class(cm).f1, cm, avg)


# ---------------------------------------------------------------------------
# ROC


class RocPoint(NamedTuple):
    fpr: float
    tpr: float
    threshold: float


def roc_curve(scores, y_true) -> list[RocPoint]:
    """One point per distinct score, swept from high to low, plus ``(0, 0, +inf)``.

    A sample counts as positive at threshold ``s`` when its score is ``>= s``.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(y_true).reshape(-1)
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("ROC labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs at least one positive and one negative sample")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tps = np.cumsum(y == 1)
    fps = np.cumsum(y == 0)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    points = [RocPoint(0.0, 0.0, float("inf"))]
    points.extend(RocPoint(float(fps[i] / n_neg), float(tps[i] / n_pos), float(s[i])) for i in ends)
    return points


def auc(curve: Sequence[RocPoint]) -> float:
    """Trapezoidal area under a curve from :func:`roc_curve`."""
    if len(curve) < 2:
        raise ValidationError("a ROC curve needs at least two points")
    fpr = np.array([p.fpr for p in curve])
    tpr = np.array([p.tpr for p in curve])
    if np.any(np.diff(fpr) < 0):
        raise ValidationError("ROC points must have non-decreasing FPR")
    if (fpr[0], tpr[0]) != (0.0, 0.0) or (fpr[-1], tpr[-1]) != (1.0, 1.0):
        raise ValidationError("ROC curve must start at (0, 0) and end at (1, 1)")
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(scores, y_true) -> float:
    return auc(roc_curve(scores, y_true))


@dataclass
class MulticlassAUC:
    value: float
    per_class: dict[int, float]
    flags: list[str]


def multiclass_auc_detail(proba, y_true) -> MulticlassAUC:
    """One-vs-rest AUC per class present in ``y_true``, macro-averaged."""
    p = np.asarray(proba, dtype=np.float64)
    y = _labels(y_true, "y_true")
    if p.ndim != 2 or p.shape[0] != y.size:
        raise ValidationError(f"probabilities {p.shape} do not match {y.size} labels")
    present = np.unique(y)
    if present.size < 2:
        raise UndefinedMetricError("multiclass AUC needs at least two classes in y_true")
    if present[0] < 0 or present[-1] >= p.shape[1]:
        raise ValidationError(f"labels must lie in [0, {p.shape[1]})")
    per = {int(c): roc_auc(p[:, c], (y == c).astype(int)) for c in present}
    flags = [f"roc_auc[{c}]: class absent from y_true, excluded" for c in range(p.shape[1]) if c not in per]
    return MulticlassAUC(float(np.mean(list(per.values()))), per, flags)


def multiclass_auc(proba, y_true) -> float:
    return multiclass_auc_detail(proba, y_true).value


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float | None
    averaging: str
    per_class: list[dict]
    flags: list[str]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def metrics_report(y_true, proba, class_names: Sequence[str] | None = None, threshold: float = 0.5) -> MetricsReport:
    """Metrics from integer labels and predicted probabilities.

    A ``(N,)`` or ``(N, 1)`` probability array means binary mode (positive
    when ``p >= threshold``); ``(N, C)`` with ``C > 1`` means multiclass mode
    with argmax predictions and macro averaging.
    """
    p = np.asarray(proba, dtype=np.float64)
    y = _labels(y_true, "y_true")
    binary = p.ndim == 1 or p.shape[1] == 1
    flags: list[str] = []
    if binary:
        score = p.reshape(-1)
        y_pred = (score >= threshold).astype(np.int64)
        n_classes, avg = 2, "binary"
        try:
            auc_value = roc_auc(score, y)
        except UndefinedMetricError as exc:
            auc_value = None
            flags.append(f"roc_auc undefined: {exc}")
    else:
        n_classes, avg = p.shape[1], "macro"
        y_pred = np.argmax(p, axis=1)
        try:
            detail = multiclass_auc_detail(p, y)
            auc_value = detail.value
            flags.extend(detail.flags)
        except UndefinedMetricError as exc:
            auc_value = None
            flags.append(f"roc_auc undefined: {exc}")

    cm = confusion(y, y_pred, n_classes)
    pc = per_class(cm)
    flags = pc.flags + flags
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    rows = [
        {
            "class": names[c],
            "precision": float(pc.precision[c]),
            "recall": float(pc.recall[c]),
            "f1": float(pc.f1[c]),
            "support": int(cm.counts[c].sum()),
            "tp": int(cm.tp[c]),
            "fp": int(cm.fp[c]),
            "fn": int(cm.fn[c]),
            "tn": int(cm.tn[c]),
        }
        for c in range(n_classes)
    ]
    return MetricsReport(
        accuracy=accuracy(cm),
        precision=_reduce(pc.precision, cm, avg),
        recall=_reduce(pc.recall, cm, avg),
        f1=_reduce(pc.f1, cm, avg),
        roc_auc=auc_value,
        averaging=avg,
        per_class=rows,
        flags=flags,
    )
