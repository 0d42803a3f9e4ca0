"""Activation capture plus neuron statistics and correlation summaries.

Layer indices follow the network: 0 is the embedding input h0, 1..L the
hidden layers, and L+1 the output (``pre`` = logit, ``post`` = pctr).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, substream
from .net import Parameters, forward_batch

DEFAULT_SAMPLE_CAP = 20_000
_CHUNK = 4096


@dataclass
class ActivationMatrix:
    layer: int
    kind: str  # "pre" or "post"
    values: np.ndarray
    source: str = ""

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class NeuronStats:
    layer: int
    mean: np.ndarray
    std: np.ndarray
    source: str = ""


@dataclass
class CorrelationSummary:
    layer: int
    avg_abs_corr: float
    source: str = ""


def sample_rows(n: int, cap: int, seed: int) -> np.ndarray:
    """Sorted uniform subsample of ``range(n)`` of size ``min(n, cap)``."""
    if cap < 1:
        raise ValueError("sample_cap must be >= 1")
    if cap >= n:
        return np.arange(n)
    return np.sort(substream(seed, "sample-rows").choice(n, size=cap, replace=False))


def capture(
    params: Parameters,
    dataset: Dataset,
    layers,
    kind: str = "post",
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    seed: int = 0,
    source: str = "",
) -> list[ActivationMatrix]:
    """Eval-mode activations of ``layers`` over a row sample of ``dataset``."""
    kinds = ("pre", "post") if kind == "both" else (kind,)
    if any(k not in ("pre", "post") for k in kinds):
        raise ValueError(f"kind must be 'pre', 'post' or 'both', got {kind!r}")
    L = params.n_hidden
    layers = list(layers)
    for k in layers:
        if not 0 <= k <= L + 1:
            raise IndexError(f"layer {k} out of range 0..{L + 1}")
    rows = sample_rows(len(dataset), sample_cap, seed)
    chunks: dict[tuple[int, str], list[np.ndarray]] = {(k, kd): [] for k in layers for kd in kinds}
    for s in range(0, len(rows), _CHUNK):
        t = forward_batch(params, dataset.take(rows[s : s + _CHUNK]))
        for k in layers:
            for kd in kinds:
                if k == 0:
                    v = t.h0
                elif k == L + 1:
                    v = (t.logit if kd == "pre" else t.pctr)[:, None]
                else:
                    v = (t.z if kd == "pre" else t.h)[k - 1]
                chunks[(k, kd)].append(v)
    out = []
    for (k, kd), parts in chunks.items():
        width = params.input_dim if k == 0 else (1 if k == L + 1 else params.weights[k - 1].shape[0])
        vals = np.concatenate(parts, axis=0) if parts else np.zeros((0, width))
        out.append(ActivationMatrix(k, kd, vals, source))
    return out


def neuron_stats(matrix: ActivationMatrix) -> NeuronStats:
    """Per-neuron mean and population standard deviation (two-pass)."""
    x = matrix.values
    if x.shape[0] < 2:
        raise ValueError("neuron_stats needs at least 2 rows")
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    return NeuronStats(matrix.layer, mean, std, matrix.source)


def dead_fraction(stats: NeuronStats, epsilon: float = 1e-6) -> float:
    """Fraction of neurons whose mean post-activation is below ``epsilon``."""
    return float(np.mean(stats.mean < epsilon))


def avg_std(stats: NeuronStats) -> float:
    return float(np.mean(stats.std))


def correlation_matrix(x: np.ndarray) -> np.ndarray:
    """Pearson correlations; pairs involving a constant column are 0."""
    n, w = x.shape
    const = np.ptp(x, axis=0) == 0
    xc = x - x.mean(axis=0)
    sd = np.sqrt((xc * xc).mean(axis=0))
    sd[const] = 1.0
    z = xc / sd
    z[:, const] = 0.0
    r = (z.T @ z) / n
    return np.clip(r, -1.0, 1.0)


def avg_abs_correlation(matrix: ActivationMatrix) -> CorrelationSummary:
    """Mean |Pearson r| over all unordered neuron pairs of a layer."""
    x = matrix.values
    if x.shape[0] < 2:
        raise ValueError("correlation needs at least 2 rows")
    w = x.shape[1]
    if w < 2:
        raise ValueError("correlation needs a layer of width >= 2")
    r = correlation_matrix(x)
    iu = np.triu_indices(w, k=1)
    return CorrelationSummary(matrix.layer, float(np.abs(r[iu]).mean()), matrix.source)
