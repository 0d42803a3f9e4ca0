"""Feature-group saliency from the gradient of pctr with respect to h0."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, FeatureSchema
from .introspection import DEFAULT_SAMPLE_CAP, sample_rows
from .net import Parameters, pctr_gradient_h0

_CHUNK = 4096


@dataclass
class SaliencyReport:
    group_ids: list[int]
    group_names: list[str]
    scores: np.ndarray
    logit_scores: np.ndarray
    n_samples: int
    source: str = ""
    step: int | None = None

    def score_of(self, group_id: int) -> float:
        return float(self.scores[self.group_ids.index(group_id)])

    def argmax_group(self) -> int:
        return self.group_ids[int(np.argmax(self.scores))]


def group_saliency(
    params: Parameters,
    dataset: Dataset,
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    seed: int = 0,
    schema: FeatureSchema | None = None,
    source: str = "",
    step: int | None = None,
) -> SaliencyReport:
    """Average over instances of the mean |d pctr / d h0| within each group's slice.

    ``logit_scores`` repeats the computation for the logit instead of pctr,
    which removes the sigmoid-derivative damping on saturated predictions.
    """
    if len(dataset) == 0:
        raise ValueError("saliency of an empty dataset")
    rows = sample_rows(len(dataset), sample_cap, seed)
    d = params.config.embedding_dim
    G = len(params.groups)
    total = np.zeros(G)
    total_logit = np.zeros(G)
    for s in range(0, len(rows), _CHUNK):
        g0, p = pctr_gradient_h0(params, dataset.take(rows[s : s + _CHUNK]))
        per = np.abs(g0).reshape(len(g0), G, d).mean(axis=2)
        total += per.sum(axis=0)
        slope = p * (1.0 - p)
        with np.errstate(divide="ignore", invalid="ignore"):
            per_logit = np.where(slope[:, None] > 0, per / slope[:, None], 0.0)
        total_logit += per_logit.sum(axis=0)
    n = len(rows)
    names = [schema[g].name if schema is not None else f"group{g}" for g in params.groups]
    return SaliencyReport(list(params.groups), names, total / n, total_logit / n, n, source, step)
