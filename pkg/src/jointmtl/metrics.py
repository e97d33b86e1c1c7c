"""Ranking and clustering metrics: AUROC, average precision, silhouette."""

from __future__ import annotations

import numpy as np

from .exceptions import MetricError

__all__ = ["MetricError", "auroc", "auprc", "silhouette"]


def _check_scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    return s, y.astype(bool)


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    starts = np.r_[0, np.nonzero(np.diff(sorted_s))[0] + 1]
    ends = np.r_[starts[1:], s.size]
    ranks = np.empty(s.size)
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted 1/2."""
    s, y = _check_scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = _average_ranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_t - R_{t-1}) * P_t.

    Scores are swept in descending order; tied scores enter together.
    """
    s, y = _check_scored(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    tp = np.cumsum(y_sorted)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def silhouette(embeddings, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points alone in their cluster score 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    lab = np.asarray(labels).reshape(-1)
    if x.shape[0] != lab.size:
        raise MetricError(f"{x.shape[0]} points but {lab.size} labels")
    clusters, inverse = np.unique(lab, return_inverse=True)
    if clusters.size < 2:
        raise MetricError("silhouette needs at least two clusters")
    dist = _pairwise_distances(x)
    onehot = np.eye(clusters.size)[inverse]
    counts = onehot.sum(axis=0)
    sums = dist @ onehot
    own = counts[inverse]
    a = np.where(own > 1, sums[np.arange(lab.size), inverse] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts
    means[np.arange(lab.size), inverse] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    if x.shape[0] <= 512:
        # explicit differences: no cancellation error for close points
        return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    sq = np.sum(x * x, axis=1)
    return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0))
