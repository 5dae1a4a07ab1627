"""Confusion matrices and the detection metrics reported per scheme and node."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise ValueError("confusion matrices have different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def one_vs_rest(self):
        """Per-class (TP, FP, FN, TN) arrays."""
        c = self.counts
        tp = np.diag(c).astype(np.int64)
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


def confusion(true_labels, predicted_labels, n_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError("true and predicted labels must be 1-D and of equal length")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def _require_samples(cm):
    if cm.total == 0:
        raise DataError("confusion matrix is empty")


def accuracy(cm: ConfusionMatrix) -> float:
    """Macro-averaged one-vs-rest accuracy, (1/U) sum_u (TP+TN)/(TP+TN+FP+FN)."""
    _require_samples(cm)
    tp, fp, fn, tn = cm.one_vs_rest()
    return float(np.mean((tp + tn) / (tp + tn + fp + fn)))


def plain_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of samples on the diagonal."""
    _require_samples(cm)
    return float(np.trace(cm.counts) / cm.total)


def _safe_ratio(num, den):
    ok = den > 0
    out = np.zeros(num.shape, dtype=float)
    out[ok] = num[ok] / den[ok]
    return out, ~ok


def precision(cm: ConfusionMatrix):
    """(macro, per-class, undefined-mask). Classes never predicted score 0."""
    _require_samples(cm)
    tp, fp, _, _ = cm.one_vs_rest()
    per, undefined = _safe_ratio(tp, tp + fp)
    return float(per.mean()), per, undefined


def recall(cm: ConfusionMatrix):
    """(macro, per-class, undefined-mask). Classes with no samples score 0."""
    _require_samples(cm)
    tp, _, fn, _ = cm.one_vs_rest()
    per, undefined = _safe_ratio(tp, tp + fn)
    return float(per.mean()), per, undefined


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    accuracy_plain: float
    macro_precision: float
    macro_recall: float
    precision: np.ndarray
    recall: np.ndarray
    precision_undefined: np.ndarray
    recall_undefined: np.ndarray
    confusion: ConfusionMatrix

    @property
    def warnings(self) -> list[str]:
        out = []
        for u in np.flatnonzero(self.precision_undefined):
            out.append(f"class {u + 1} never predicted; precision set to 0")
        for u in np.flatnonzero(self.recall_undefined):
            out.append(f"class {u + 1} absent from labels; recall set to 0")
        return out


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    mp, per_p, und_p = precision(cm)
    mr, per_r, und_r = recall(cm)
    return Metrics(accuracy(cm), plain_accuracy(cm), mp, mr, per_p, per_r, und_p, und_r, cm)


def evaluate(model, dataset) -> Metrics:
    from .dbn import predict

    pred = predict(model, dataset.features)
    return compute_metrics(confusion(dataset.labels, pred, dataset.n_classes))


def report(metrics: Metrics, scheme=None, node=None, **extra) -> dict:
    """JSON-ready report for one (scheme, node) evaluation."""
    per_class = [
        {
            "class": u + 1,
            "precision": float(metrics.precision[u]),
            "recall": float(metrics.recall[u]),
            "support": int(metrics.confusion.counts[u].sum()),
        }
        for u in range(metrics.confusion.n_classes)
    ]
    out = {
        "scheme": scheme,
        "node": node,
        "accuracy_eq15": metrics.accuracy,
        "accuracy_plain": metrics.accuracy_plain,
        "macro_precision": metrics.macro_precision,
        "macro_recall": metrics.macro_recall,
        "per_class": per_class,
        "confusion": metrics.confusion.counts.tolist(),
    }
    if metrics.warnings:
        out["warnings"] = metrics.warnings
    out.update(extra)
    return out


REPORT_KEYS = (
    "scheme", "node", "accuracy_eq15", "accuracy_plain",
    "macro_precision", "macro_recall", "per_class", "confusion",
)
