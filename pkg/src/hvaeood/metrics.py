"""Threshold-free detection metrics and unit conversions.

Convention throughout: the positive class is OOD, and higher scores mean
"more OOD". Callers scoring likelihood bounds should negate them first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_io import EmptyInput


def auroc(pos, neg) -> float:
    """Probability a random positive outscores a random negative (ties half).

    Rank-based (Mann-Whitney) computation in O(n log n); exactly matches the
    pairwise count (#{pos > neg} + 0.5 * #{pos = neg}) / (|pos| * |neg|).
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EmptyInput("auroc requires nonempty score vectors")
    combined = np.concatenate([pos, neg])
    ranks = _average_ranks(combined)
    pos_rank_sum = ranks[: pos.size].sum()
    u = pos_rank_sum - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their block."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _sweep(pos: np.ndarray, neg: np.ndarray):
    """Cumulative TP/FP counts at every distinct threshold, descending.

    Equal scores are flagged together: the classifier at threshold t flags
    everything with score >= t.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EmptyInput("metric sweep requires nonempty score vectors")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores = scores[order]
    labels = labels[order]
    distinct = np.nonzero(np.diff(scores))[0]
    cut = np.concatenate([distinct, [scores.size - 1]])
    tp = np.cumsum(labels)[cut]
    fp = np.cumsum(1.0 - labels)[cut]
    thresholds = scores[cut]
    return thresholds, tp, fp, pos.size, neg.size


def auprc(pos, neg) -> float:
    """Area under precision-recall by step-wise summation (no interpolation)."""
    _, tp, fp, n_pos, _ = _sweep(pos, neg)
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, 1.0)
    recall_steps = np.diff(recall, prepend=0.0)
    return float(np.sum(recall_steps * precision))


def fpr_at_tpr(pos, neg, target_tpr: float = 0.8) -> float:
    """Smallest false-positive rate among thresholds reaching the target TPR."""
    _, tp, fp, n_pos, n_neg = _sweep(pos, neg)
    tpr = tp / n_pos
    fpr = fp / n_neg
    feasible = tpr >= target_tpr
    return float(fpr[feasible].min())


@dataclass
class RocCurve:
    """Full ROC sweep; thresholds descending, endpoints (0,0) and (1,1)."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray

    def area(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))

    def to_csv(self, path, header_lines=()) -> None:
        lines = list(header_lines) + ["threshold,fpr,tpr"]
        for t, f, s in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{t:.17g},{f:.17g},{s:.17g}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def roc_curve(pos, neg) -> RocCurve:
    """ROC sweep whose trapezoidal area equals `auroc` (ties on the diagonal)."""
    thresholds, tp, fp, n_pos, n_neg = _sweep(pos, neg)
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    thresholds = np.concatenate([[np.inf], thresholds, [-np.inf]])
    return RocCurve(thresholds=thresholds, tpr=tpr, fpr=fpr)


def bits_per_dim(nats_per_example, dim: int):
    """Convert per-example log-likelihood in nats to bits per dimension."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    return -np.asarray(nats_per_example, dtype=np.float64) / (dim * math.log(2.0))
