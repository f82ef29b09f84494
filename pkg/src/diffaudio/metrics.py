"""Accuracy and mean average precision."""

from __future__ import annotations

import numpy as np


def accuracy(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels).reshape(-1)
    true = np.asarray(true_labels).reshape(-1)
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    return float(np.mean(pred == true))


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score; equal scores keep their original index
    order (a stable sort), so earlier examples rank first among ties.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def mean_average_precision(scores, labels, return_skipped: bool = False):
    """Mean AP over classes (columns) that have at least one positive.

    With ``return_skipped`` also returns the indices of classes left out.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y.reshape(-1, 1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    aps, skipped = [], []
    for c in range(s.shape[1]):
        if y[:, c].any():
            aps.append(average_precision(s[:, c], y[:, c]))
        else:
            skipped.append(c)
    if not aps:
        raise ValueError("no class has a positive example")
    m = float(np.mean(aps))
    return (m, skipped) if return_skipped else m
