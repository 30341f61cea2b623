"""Slide-level classification metrics: accuracy, macro F1/recall/precision, ROC AUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

METRIC_KEYS = ("acc", "f1", "auc", "recall", "precision")


@dataclass
class MetricsReport:
    acc: float            # percent
    f1: float
    auc: float | None     # None when only one class is present
    recall: float
    precision: float
    confusion: np.ndarray  # confusion[true, pred]

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def lines(self):
        """``key=value`` lines, one per metric; an undefined AUC prints as ``undefined``."""
        out = []
        for key, value in self.as_dict().items():
            out.append(f"{key}=undefined" if value is None else f"{key}={value:.6f}")
        return out


def confusion_matrix(labels, preds, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def _safe_div(num, den):
    return num / den if den else 0.0


def per_class_scores(cm):
    """Precision, recall and F1 for each class from a confusion matrix."""
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = np.array([_safe_div(t, t + f) for t, f in zip(tp, fp)])
    recall = np.array([_safe_div(t, t + f) for t, f in zip(tp, fn)])
    f1 = np.array([_safe_div(2 * t, 2 * t + a + b) for t, a, b in zip(tp, fp, fn)])
    return precision, recall, f1


def f1_from_counts(tp, fp, fn):
    return _safe_div(2 * tp, 2 * tp + fp + fn)


def roc_auc(scores, labels):
    """Probability that a random positive outranks a random negative (ties count 1/2).

    Computed from mid-ranks (Mann-Whitney U). Returns None without both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(labels, probs, average="macro"):
    """Metrics for predicted class probabilities ``probs`` of shape ``(n, n_classes)``.

    ``average="macro"`` averages F1/recall/precision over classes; ``"binary"``
    reports them for class 1 only. AUC always scores class 1 in the binary
    case and is the one-vs-rest mean otherwise.
    """
    labels = np.asarray(labels, dtype=np.intp)
    probs = np.asarray(probs, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("cannot compute metrics of an empty dataset")
    n_classes = probs.shape[1]
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(labels, preds, n_classes)
    acc = 100.0 * np.trace(cm) / cm.sum()
    precision, recall, f1 = per_class_scores(cm)
    if average == "binary":
        p, r, f = precision[1], recall[1], f1[1]
    elif average == "macro":
        p, r, f = precision.mean(), recall.mean(), f1.mean()
    else:
        raise ValueError(f"unknown average {average!r}")
    if n_classes == 2:
        auc = roc_auc(probs[:, 1], labels == 1)
    else:
        per = [roc_auc(probs[:, c], labels == c) for c in range(n_classes)]
        per = [a for a in per if a is not None]
        auc = float(np.mean(per)) if per else None
    return MetricsReport(float(acc), float(f), auc, float(r), float(p), cm)
