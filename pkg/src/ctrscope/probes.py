"""Linear probes on frozen hidden representations.

A probe is a logistic regression trained on one layer's output vectors from
the training set and scored by AUC on each test day.  Probe inputs come from
``capture`` with ``post`` activations, so layer 0 probes the raw embedding
vector and layer L+1 the network's own pctr.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, substream
from .errors import UndefinedMetricError
from .introspection import capture, sample_rows
from .metrics import auc, logloss
from .net import Parameters


@dataclass
class ProbeConfig:
    learning_rate: float = 0.005
    init_accumulator: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 50
    tol: float = 1e-5
    seed: int = 0
    # rows of the training set used to fit each probe
    sample_cap: int = 100_000


@dataclass
class ProbeModel:
    layer: int
    weights: np.ndarray
    bias: float
    trained_at_step: int | None = None
    epochs: int = 0
    final_logloss: float = math.nan

    def score(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * (x @ self.weights + self.bias)))


@dataclass
class ProbeResult:
    layers: list[int]
    days: list[str]
    auc: np.ndarray  # (len(layers), len(days))
    step: int | None = None

    def get(self, layer: int, day: str) -> float:
        return float(self.auc[self.layers.index(layer), self.days.index(day)])

    def rows(self):
        for i, layer in enumerate(self.layers):
            for j, day in enumerate(self.days):
                yield layer, day, float(self.auc[i, j])


def fit_logistic(x: np.ndarray, y: np.ndarray, config: ProbeConfig) -> tuple[np.ndarray, float, int, float]:
    """Adagrad logistic regression until the epoch logloss stops improving.

    Returns ``(weights, bias, epochs, final_logloss)``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.min() == y.max():
        raise UndefinedMetricError("probe training data has a single class")
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    acc_w = np.full(d, config.init_accumulator)
    acc_b = config.init_accumulator
    lr = config.learning_rate
    prev = logloss(np.full(n, 0.5), y)
    epochs = 0
    for epoch in range(config.max_epochs):
        perm = substream(config.seed, "probe-shuffle", epoch).permutation(n)
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            xb = x[idx]
            p = 0.5 * (1.0 + np.tanh(0.5 * (xb @ w + b)))
            r = (p - y[idx]) / len(idx)
            gw = xb.T @ r
            gb = float(r.sum())
            acc_w += gw * gw
            acc_b += gb * gb
            w -= lr * gw / np.sqrt(acc_w)
            b -= lr * gb / math.sqrt(acc_b)
        epochs = epoch + 1
        cur = logloss(0.5 * (1.0 + np.tanh(0.5 * (x @ w + b))), y)
        if prev - cur < config.tol * abs(prev):
            prev = cur
            break
        prev = cur
    return w, b, epochs, prev


def _layer_inputs(params: Parameters, data: Dataset, layer: int, cap: int, seed: int) -> np.ndarray:
    return capture(params, data, [layer], "post", sample_cap=cap, seed=seed)[0].values


def train_probe(
    params: Parameters,
    layer: int,
    train_set: Dataset,
    config: ProbeConfig | None = None,
    step: int | None = None,
) -> ProbeModel:
    config = config or ProbeConfig()
    rows = sample_rows(len(train_set), config.sample_cap, config.seed)
    sub = train_set.take(rows)
    x = _layer_inputs(params, sub, layer, len(sub), config.seed)
    w, b, epochs, ll = fit_logistic(x, sub.labels, config)
    return ProbeModel(layer, w, b, step, epochs, ll)


def train_probes(
    params: Parameters,
    layers,
    train_set: Dataset,
    config: ProbeConfig | None = None,
    step: int | None = None,
) -> list[ProbeModel]:
    return [train_probe(params, k, train_set, config, step) for k in layers]


def eval_probes(
    params: Parameters,
    probes: list[ProbeModel],
    test_sets: dict[str, Dataset],
    sample_cap: int | None = None,
) -> ProbeResult:
    layers = [p.layer for p in probes]
    days = list(test_sets)
    out = np.empty((len(layers), len(days)))
    for j, (name, data) in enumerate(test_sets.items()):
        cap = len(data) if sample_cap is None else sample_cap
        mats = capture(params, data, sorted(set(layers)), "post", sample_cap=cap)
        by_layer = {m.layer: m.values for m in mats}
        labels = data.labels[sample_rows(len(data), cap, 0)]
        for i, probe in enumerate(probes):
            out[i, j] = auc(probe.score(by_layer[probe.layer]), labels)
    step = probes[0].trained_at_step if probes else None
    return ProbeResult(layers, days, out, step)
