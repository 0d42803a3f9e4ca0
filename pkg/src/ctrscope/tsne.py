"""Exact O(n^2) t-SNE for projecting hidden-layer vectors to 2-D."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import Dataset, substream


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    seed: int = 0
    entropy_tol: float = 1e-5
    min_gain: float = 0.01


@dataclass
class TsneEmbedding:
    points: np.ndarray
    labels: np.ndarray | None
    kl_trace: np.ndarray
    # index into kl_trace of the first iteration without exaggeration
    exaggeration_end: int = 0
    entropies: np.ndarray | None = field(default=None, repr=False)


def sample_for_projection(dataset: Dataset, n_pos: int, n_neg: int, seed: int) -> Dataset:
    """Class-stratified uniform sample, returned in dataset order."""
    pos = np.flatnonzero(dataset.labels == 1)
    neg = np.flatnonzero(dataset.labels != 1)
    if n_pos > len(pos):
        raise ValueError(f"requested {n_pos} clicked instances but only {len(pos)} available")
    if n_neg > len(neg):
        raise ValueError(f"requested {n_neg} non-clicked instances but only {len(neg)} available")
    rng = substream(seed, "projection-sample")
    picked = np.concatenate(
        [rng.choice(pos, size=n_pos, replace=False), rng.choice(neg, size=n_neg, replace=False)]
    )
    return dataset.take(np.sort(picked).astype(np.int64))


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # shifting by the nearest distance leaves the normalised row unchanged
    p = np.exp(-(d - d.min()) * beta)
    s = p.sum()
    p /= s
    return math.log(s) + beta * float(np.dot(d - d.min(), p)), p


def conditional_affinities(
    x: np.ndarray, perplexity: float, tol: float = 1e-5, max_tries: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic Gaussian affinities, bandwidth set by bisection.

    Returns ``(P_cond, entropies)``; each row's entropy (nats) is within
    ``tol`` of ``log(perplexity)``.
    """
    n = len(x)
    d = squared_distances(x)
    target = math.log(perplexity)
    pc = np.zeros((n, n))
    entropies = np.empty(n)
    for i in range(n):
        di = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, math.inf
        scale = np.median(di)
        if scale > 0:
            beta = 1.0 / scale
        h, p = _row_entropy(di, beta)
        for _ in range(max_tries):
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _row_entropy(di, beta)
        entropies[i] = h
        pc[i, np.arange(n) != i] = p
    return pc, entropies


def joint_probabilities(x: np.ndarray, perplexity: float, tol: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    pc, ent = conditional_affinities(x, perplexity, tol)
    p = pc + pc.T
    p /= p.sum()
    return p, ent


def _kl_and_grad(p: np.ndarray, y: np.ndarray, exaggeration: float, plogp: float | None = None):
    """KL(P || Q) and its gradient; ``p`` must have a zero diagonal.

    ``plogp`` is the constant sum of p log p; pass None to skip the KL value.
    """
    d2 = cdist(y, y, "sqeuclidean")
    num = d2 + 1.0
    np.reciprocal(num, out=num)
    np.fill_diagonal(num, 0.0)
    z = num.sum()
    kl = math.nan
    if plogp is not None:
        # sum p log(p/q) = sum p log p + sum p log(1 + d^2) + log z
        np.log1p(d2, out=d2)
        d2 *= p
        kl = plogp + float(d2.sum()) + math.log(z)
    w = p * exaggeration
    num_z = num / z
    w -= num_z
    w *= num
    grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
    return kl, grad


def _plogp(p: np.ndarray) -> float:
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m])))


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    return _kl_and_grad(p, y, 1.0, _plogp(p))[0]


def kl_gradient(p: np.ndarray, y: np.ndarray, exaggeration: float = 1.0) -> np.ndarray:
    """Gradient of KL(P || Q) in the embedding coordinates."""
    return _kl_and_grad(p, y, exaggeration)[1]


def tsne(vectors, config: TsneConfig | None = None, labels=None) -> TsneEmbedding:
    """Embed ``vectors`` in 2-D.

    After early exaggeration a step that would raise the KL objective is
    rejected: momentum and gains reset and the learning rate halves, so the
    recorded objective never increases from then on.
    """
    config = config or TsneConfig()
    x = np.asarray(vectors, dtype=np.float64)
    n = len(x)
    if x.ndim != 2 or n < 4:
        raise ValueError("t-SNE needs a 2-d array with at least 4 rows")
    if not np.isfinite(x).all():
        raise ValueError("t-SNE input contains non-finite values")
    if not 1.0 < config.perplexity < n / 3.0:
        raise ValueError(f"perplexity {config.perplexity} infeasible for n={n} (need 1 < perplexity < n/3)")
    if config.iterations < 1:
        raise ValueError("iterations must be >= 1")
    lab = None if labels is None else np.asarray(labels)
    if np.ptp(x, axis=0).max() == 0:
        warnings.warn("all t-SNE input points are identical; returning a zero embedding")
        return TsneEmbedding(np.zeros((n, 2)), lab, np.zeros(1), 0)

    p, ent = joint_probabilities(x, config.perplexity, config.entropy_tol)
    p = np.maximum(p, 1e-300)
    np.fill_diagonal(p, 0.0)
    p /= p.sum()
    plogp = _plogp(p)
    rng = substream(config.seed, "tsne-init")
    y = rng.normal(0.0, 1e-4, (n, 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    eta = config.learning_rate
    trace = []
    prev = None  # (y, kl, grad) of the last accepted state
    for it in range(config.iterations):
        exag = config.early_exaggeration if it < config.exaggeration_iters else 1.0
        mom = config.momentum if it < config.momentum_switch else config.final_momentum
        kl, grad = _kl_and_grad(p, y, exag, plogp)
        if exag == 1.0 and prev is not None and kl > prev[1]:
            y, kl, grad = prev
            vel[:] = 0.0
            gains[:] = 1.0
            eta *= 0.5
        elif exag == 1.0:
            prev = (y.copy(), kl, grad)
        trace.append(kl)
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, config.min_gain, out=gains)
        vel = mom * vel - eta * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
    # the final step was never evaluated; fall back to the last accepted state if it got worse
    final_kl = _kl_and_grad(p, y, 1.0, plogp)[0]
    if prev is not None and final_kl > prev[1]:
        y, final_kl = prev[0], prev[1]
    trace.append(final_kl)
    return TsneEmbedding(y, lab, np.array(trace), min(config.exaggeration_iters, config.iterations), ent)
