"""Classification metrics: accuracy, macro recall/F1, and rank-based AUC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UndefinedMetricError


@dataclass
class EvalResult:
    accuracy: float
    recall_macro: float
    f1_macro: float
    auc: float | None
    confusion: np.ndarray


def confusion_metrics(predictions, labels, n_classes: int) -> EvalResult:
    """Confusion-matrix metrics; macro means are unweighted over classes.

    A class with zero support contributes recall 0 to the macro mean.
    """
    preds = np.asarray(predictions, dtype=np.intp)
    labs = np.asarray(labels, dtype=np.intp)
    if preds.shape != labs.shape or preds.size == 0:
        raise DataError("predictions and labels must be equal-length and non-empty")
    for arr, what in ((preds, "prediction"), (labs, "label")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise DataError(f"{what} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labs, preds), 1)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)
    return EvalResult(
        accuracy=float(tp.sum() / cm.sum()),
        recall_macro=float(recall.mean()),
        f1_macro=float(f1.mean()),
        auc=None,
        confusion=cm,
    )


def auc_rank(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if s.shape != y.shape or s.size == 0:
        raise DataError("scores and labels must be equal-length and non-empty")
    if set(np.unique(y)) - {0, 1}:
        raise DataError("labels must be binary for AUC")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = float(ranks[y == 1].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
