"""Classification metrics: confusion matrix, accuracies, ROC curves, AUC.

ROC curves are one-vs-rest over per-class scores. The threshold sweep
visits every distinct score once, descending, which yields the complete
staircase from (0, 0) to (1, 1); AUC integrates it with the trapezoid
rule.
"""

from __future__ import annotations

import numpy as np


def confusion_matrix(
    y_true: np.ndarray, y_pred: np.ndarray, n_classes: int
) -> np.ndarray:
    """Rows are true classes, columns predicted."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if ((y_true < 0) | (y_true >= n_classes)).any():
        raise ValueError("true label out of range")
    if ((y_pred < 0) | (y_pred >= n_classes)).any():
        raise ValueError("predicted label out of range")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return conf


def per_class_accuracy(conf: np.ndarray) -> np.ndarray:
    """Percentage of each row's mass on the diagonal; empty rows give 0."""
    row_sums = conf.sum(axis=1)
    out = np.zeros(len(conf), dtype=np.float64)
    present = row_sums > 0
    out[present] = 100.0 * np.diag(conf)[present] / row_sums[present]
    return out


def overall_accuracy(conf: np.ndarray) -> float:
    total = conf.sum()
    return float(np.trace(conf) / total) if total else 0.0


def macro_accuracy(conf: np.ndarray) -> float:
    """Mean per-class accuracy (fraction, not percent) over non-empty rows."""
    row_sums = conf.sum(axis=1)
    present = row_sums > 0
    if not present.any():
        return 0.0
    return float(np.mean(np.diag(conf)[present] / row_sums[present]))


def roc_curve(scores: np.ndarray, positives: np.ndarray) -> list[tuple[float, float]]:
    """(fpr, tpr) staircase for binary ground truth, sweeping thresholds
    over the distinct scores in descending order."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positives[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    # keep only the last index of each run of equal scores
    distinct = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    points = [(0.0, 0.0)]
    for idx in np.flatnonzero(distinct):
        points.append((fp[idx] / n_neg, tp[idx] / n_pos))
    return points


def auc_trapezoid(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_one_vs_rest(
    probs: np.ndarray, y_true: np.ndarray, n_classes: int
) -> tuple[list[list[tuple[float, float]]], list[float]]:
    """Per-class ROC curves and AUCs from an (N, C) score matrix.

    Classes absent from y_true (or covering all of it) get an empty curve
    and AUC nan.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=int)
    curves: list[list[tuple[float, float]]] = []
    aucs: list[float] = []
    for c in range(n_classes):
        positives = y_true == c
        if positives.all() or not positives.any():
            curves.append([])
            aucs.append(float("nan"))
            continue
        curve = roc_curve(probs[:, c], positives)
        curves.append(curve)
        aucs.append(auc_trapezoid(curve))
    return curves, aucs


def roc_micro_average(
    probs: np.ndarray, y_true: np.ndarray, n_classes: int
) -> list[tuple[float, float]]:
    """Single curve pooling every (sample, class) decision."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=int)
    onehot = np.zeros_like(probs, dtype=bool)
    onehot[np.arange(len(y_true)), y_true] = True
    return roc_curve(probs.ravel(), onehot.ravel())


__all__ = [
    "confusion_matrix",
    "per_class_accuracy",
    "overall_accuracy",
    "macro_accuracy",
    "roc_curve",
    "auc_trapezoid",
    "roc_one_vs_rest",
    "roc_micro_average",
]
