from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise ValueError("labels must be 0/1")
    if pos.all() or not pos.any():
        raise ValueError("both classes must be present")
    return scores, pos


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks for ties."""
    scores, pos = _check_binary(scores, labels)
    n_pos = pos.sum()
    n_neg = pos.size - n_pos
    ranks = rankdata(scores)  # average ranks
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def operating_point(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(sensitivity, specificity), predicting positive when score >= threshold."""
    scores, pos = _check_binary(scores, labels)
    pred = scores >= threshold
    tp = np.sum(pred & pos)
    tn = np.sum(~pred & ~pos)
    return float(tp / pos.sum()), float(tn / (~pos).sum())
