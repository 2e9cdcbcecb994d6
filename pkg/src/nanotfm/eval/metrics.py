"""ROC AUC, accuracy, and stratified resampling."""
from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _average_ranks(scores):
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    n = len(s)
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], n]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def roc_auc(scores, labels):
    """P(score of a positive > score of a negative), ties counting one half.

    Computed from rank sums (Mann-Whitney U) in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise ValueError("roc_auc expects binary labels in {0, 1}")
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC is undefined when only one class is present")
    if not np.isfinite(scores).all():
        raise ValueError("roc_auc received non-finite scores")
    u = _average_ranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(proba, labels):
    proba = np.asarray(proba)
    return float(np.mean(proba.argmax(axis=-1) == np.asarray(labels)))


def stratified_kfold(y, k=5, repetitions=1, seed=0):
    """Fold ids, shape ``(repetitions, n)``, for repeated stratified k-fold CV.

    Within a repetition each class is shuffled and dealt round-robin across
    the folds, continuing where the previous class stopped, so every fold
    holds ``floor`` or ``ceil`` of ``n_c / k`` members of each class ``c``.
    """
    y = np.asarray(y)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(y, return_counts=True)
    small = classes[counts < k]
    if len(small):
        raise ValueError(f"class {small[0]!r} has {counts[counts < k][0]} members, fewer than k={k}")
    folds = np.empty((repetitions, len(y)), dtype=np.int64)
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        offset = 0
        for c in classes:
            members = rng.permutation(np.flatnonzero(y == c))
            folds[rep, members] = (offset + np.arange(len(members))) % k
            offset = (offset + len(members)) % k
    return folds


def stratified_subsample(y, max_rows, seed=0):
    """Sorted indices of at most ``max_rows`` rows, class proportions kept.

    Per-class quotas use largest remainders, with every present class
    keeping at least one row.
    """
    y = np.asarray(y)
    n = len(y)
    if n <= max_rows:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    exact = counts * (max_rows / n)
    quota = np.maximum(np.floor(exact).astype(int), 1)
    while quota.sum() > max_rows:
        quota[np.argmax(quota)] -= 1
    left = max_rows - quota.sum()
    if left > 0:
        for i in np.argsort(-(exact - np.floor(exact)), kind="stable")[:left]:
            quota[i] += 1
    picked = [rng.choice(np.flatnonzero(y == c), size=q, replace=False) for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(picked))
