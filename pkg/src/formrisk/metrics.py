"""Rank-based discrimination metrics."""
from __future__ import annotations

import numpy as np


class UndefinedAUC(ValueError):
    """Raised when AUC is requested for labels containing a single class."""


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1 .. end
    run_of = np.repeat(np.arange(len(starts)), ends - starts)
    ranks = np.empty(len(values), dtype=float)
    ranks[order] = avg[run_of]
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half, in O(n log n)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC points (fpr, tpr, threshold) for descending thresholds."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("ROC curve needs both classes")
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    thr = [np.inf]
    for t in thresholds:
        pred = scores >= t
        tpr.append(float(np.sum(pred & labels) / n_pos))
        fpr.append(float(np.sum(pred & ~labels) / n_neg))
        thr.append(float(t))
    return np.array(fpr), np.array(tpr), np.array(thr)
