"""Binary classification metrics.

AUROC uses the midrank formula, so tied scores get half credit.  PR-AUC is
the step integral of the precision-recall curve (average precision): each
distinct threshold contributes ``(recall_k - recall_{k-1}) * precision_k``,
starting from recall 0, with no interpolation between points.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def _ranking_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("ranking metrics need both classes present")
    return s, y, n_pos


def auroc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + 0.5 P(tie)."""
    s, y, n_pos = _ranking_inputs(scores, labels)
    n_neg = y.size - n_pos
    ranks = rankdata(s)  # average ranks for ties
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    s, y, n_pos = _ranking_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep the last index of every block of equal scores (one point per threshold)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _binary_preds(preds, labels):
    p = _binary_labels(preds)
    y = _binary_labels(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _binary_preds(preds, labels)
    return float(np.mean(p == y))


def f1(preds, labels) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    p, y = _binary_preds(preds, labels)
    tp = int(np.sum((p == 1) & (y == 1)))
    denom = int(p.sum()) + int(y.sum())
    return 0.0 if tp == 0 else 2.0 * tp / denom


def threshold(probabilities, cut: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities) >= cut).astype(np.int64)


def all_metrics(probabilities, labels, cut: float = 0.5) -> dict[str, float]:
    preds = threshold(probabilities, cut)
    return {
        "auroc": auroc(probabilities, labels),
        "accuracy": accuracy(preds, labels),
        "f1": f1(preds, labels),
        "pr_auc": pr_auc(probabilities, labels),
    }
