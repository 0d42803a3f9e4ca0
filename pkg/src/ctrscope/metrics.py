"""AUC, logloss and normalised prediction-score histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError
from .net import PCTR_CLAMP


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    # midranks doubled so they are exact integers; the final division is the
    # only rounding step
    ranks2 = (2.0 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(ranks2[pos].sum()) - n_pos * (n_pos + 1)
    return u2 / (2.0 * n_pos * n_neg)


def logloss(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(scores) == 0:
        raise ValueError("logloss of empty input")
    p = np.clip(scores, PCTR_CLAMP, 1.0 - PCTR_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)))


@dataclass
class ScoreHistogram:
    """Counts of normalised scores; the last bin is the overflow ``[hi, inf)``."""

    bin_edges: np.ndarray
    counts_pos: np.ndarray
    counts_neg: np.ndarray
    normalizer: float

    @property
    def total(self) -> int:
        return int(self.counts_pos.sum() + self.counts_neg.sum())

    def rows(self):
        for lo, hi, p, n in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts_pos, self.counts_neg):
            yield float(lo), float(hi), int(p), int(n)

    def mean_normalized(self, positive: bool) -> float:
        """Approximate mean normalised score from bin centres (overflow at its lower edge)."""
        counts = self.counts_pos if positive else self.counts_neg
        centers = 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])
        centers[-1] = self.bin_edges[-2]
        return float((counts * centers).sum() / max(counts.sum(), 1))


def score_histogram(scores, labels, normalizer: float, bins: int = 100, upper: float = 5.0) -> ScoreHistogram:
    if not normalizer > 0:
        raise ValueError("normalizer must be > 0")
    x = np.asarray(scores, dtype=np.float64) / normalizer
    labels = np.asarray(labels)
    inner = np.linspace(0.0, upper, bins + 1)
    edges = np.append(inner, np.inf)
    idx = np.minimum(np.floor(x / upper * bins).astype(np.int64), bins)
    idx = np.maximum(idx, 0)
    pos = np.bincount(idx[labels == 1], minlength=bins + 1)
    neg = np.bincount(idx[labels != 1], minlength=bins + 1)
    return ScoreHistogram(edges, pos, neg, float(normalizer))
