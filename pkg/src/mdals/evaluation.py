"""Ranking and regression metrics for binary labels."""

from __future__ import annotations

import numpy as np

from .model import ModelParams, predict_pairs


class MetricError(ValueError):
    pass


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-d and of equal length")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], values.size]
    # mean of positions start+1 .. end, kept exact as a half-integer
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(values.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def mann_whitney_u(scores, labels) -> tuple[float, int, int]:
    """U statistic of positives over negatives with ties counted as 1/2."""
    scores, labels = _check(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    rank_sum = float(midranks(scores)[pos].sum())
    return rank_sum - n_pos * (n_pos + 1) / 2.0, n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2)."""
    u, n_pos, n_neg = mann_whitney_u(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC AUC needs both positive and negative labels")
    return u / (n_pos * n_neg)


def rmse(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    if scores.size == 0:
        raise MetricError("RMSE of an empty set")
    return float(np.sqrt(np.mean((scores - labels) ** 2)))


def evaluate_model(params: ModelParams, ds, split: str = "validation") -> dict:
    """Predict every interaction of ``split``; ``auc`` is None when only one class is present."""
    users, items, labels = ds.pairs(split)
    if labels.size == 0:
        raise MetricError(f"split {split!r} is empty")
    scores = predict_pairs(params, users, items)
    try:
        auc = roc_auc(scores, labels)
    except MetricError:
        auc = None
    return {"auc": auc, "rmse": rmse(scores, labels), "n": int(labels.size)}
