"""Threshold-free ranking metrics and the average forgetting measure."""

from __future__ import annotations

import math
from decimal import Decimal

import numpy as np
from scipy.stats import rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    return scores, labels.astype(bool)


def auroc(scores, labels):
    """Mann-Whitney AUROC; tied (pos, neg) pairs count one half."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def aupr(scores, labels):
    """Average precision: sum of ``(R_n - R_{n-1}) * P_n`` over descending distinct thresholds."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("aupr needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp_at = tp[ends]
    predicted = ends + 1
    gained = np.diff(np.r_[0, tp_at])
    terms = (gained / n_pos) * (tp_at / predicted)
    return float(math.fsum(terms[gained > 0].tolist()))


def avg_fm(perf, k=None):
    """Average forgetting after task ``k`` (1-based).

    ``perf[l][j]`` (0-based) is the metric on task ``j`` after training
    through task ``l``; only ``l >= j`` entries are read. The best value of
    task ``j`` is taken over rows ``j .. k-2`` and compared with row ``k-1``.
    Negative values (backward transfer) are not clamped.

    Drops are taken in decimal arithmetic on each value's shortest repr, so
    ``0.95 - 0.80`` is ``0.15`` rather than its binary neighbour.
    """
    if k is None:
        k = len(perf)
    if k < 2:
        raise ValueError("forgetting needs at least two tasks")
    drops = []
    for j in range(k - 1):
        try:
            history = [perf[l][j] for l in range(j, k - 1)]
            final = perf[k - 1][j]
        except (IndexError, KeyError) as exc:
            raise ValueError(f"performance matrix is missing entries for task {j}") from exc
        if final is None or any(v is None for v in history):
            raise ValueError(f"performance matrix is missing entries for task {j}")
        drops.append(Decimal(repr(float(max(history)))) - Decimal(repr(float(final))))
    return float(sum(drops) / (k - 1))
