"""Experiment configuration and the drivers shared by the CLI and tests.

One root seed fans out into named child seeds, so the nested ``seed`` keys of
the generator and training sections are overwritten when an experiment is
resolved.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ._config import from_mapping
from .data import Dataset, GeneratorConfig, GroundTruth, build_ground_truth, derive_seed, sample_day
from .errors import SchemaError
from .net import ModelConfig, Parameters, init_params
from .train import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class ReportConfig:
    stats: bool = True
    probes: bool = True
    saliency: bool = True
    tsne: bool = True
    histograms: bool = True
    sample_cap: int = 20_000
    histogram_bins: int = 100
    tsne_layers: tuple[int, ...] = (2, 3, 4)
    tsne_pos: int = 1000
    tsne_neg: int = 1000
    tsne_iterations: int = 1000
    tsne_perplexity: float = 30.0
    logit_saliency: bool = True

    def __post_init__(self):
        self.tsne_layers = tuple(self.tsne_layers)


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 100_000
    n_test: int = 20_000
    n_days: int = 8
    # test days scored at every eval point during training; None means all
    timeline_days: tuple[int, ...] | None = None
    checkpoint_every: int = 0
    output_dir: str = "out"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reports: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        if self.timeline_days is not None:
            self.timeline_days = tuple(self.timeline_days)

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1 or self.n_days < 1:
            raise SchemaError("n_train, n_test and n_days must be >= 1")
        self.generator.validate()
        self.model.validate(self.generator.schema)
        self.train.validate()

    def resolved(self) -> ExperimentConfig:
        """Copy with every component seed derived from the root seed."""
        c = copy.deepcopy(self)
        c.generator.seed = derive_seed(self.seed, "ground-truth")
        c.train.seed = derive_seed(self.seed, "train-loop")
        return c

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, "init-params")

    @property
    def train_data_seed(self) -> int:
        return derive_seed(self.seed, "train-data")

    @property
    def test_data_seed(self) -> int:
        return derive_seed(self.seed, "test-data")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_days": self.n_days,
            "timeline_days": None if self.timeline_days is None else list(self.timeline_days),
            "checkpoint_every": self.checkpoint_every,
            "output_dir": self.output_dir,
            "generator": self.generator.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "reports": {**dataclasses.asdict(self.reports), "tsne_layers": list(self.reports.tsne_layers)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d or {})
        sections = {
            "generator": GeneratorConfig.from_dict(d.pop("generator", {}) or {}),
            "model": ModelConfig.from_dict(d.pop("model", {}) or {}),
            "train": TrainConfig.from_dict(d.pop("train", {}) or {}),
        }
        sections["reports"] = from_mapping(ReportConfig, d.pop("reports", {}) or {}, "reports")
        return from_mapping(cls, d, "experiment", **sections)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise SchemaError(f"cannot parse config {path}: {e}") from e
        return cls.from_dict(d)


def apply_override(d: dict, key: str, value: Any) -> None:
    """Set a dotted ``key`` in a nested config dict, parsing ``value`` as YAML."""
    if isinstance(value, str):
        value = yaml.safe_load(value)
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


# --------------------------------------------------------------------------
# data


def generate_datasets(exp: ExperimentConfig) -> tuple[GroundTruth, dict[int, Dataset]]:
    """Training day 0 plus test days 1..n_days.

    Test days share one feature draw (separate from training) and differ
    only through drifted labels.
    """
    exp = exp.resolved()
    truth = build_ground_truth(exp.generator)
    days = {0: sample_day(truth, 0, exp.n_train, exp.train_data_seed)}
    for d in range(1, exp.n_days + 1):
        days[d] = sample_day(truth, d, exp.n_test, exp.test_data_seed)
    return truth, days


def test_sets(days: dict[int, Dataset], which=None) -> dict[str, Dataset]:
    keys = sorted(k for k in days if k > 0) if which is None else list(which)
    return {f"test{d}": days[d] for d in keys}


# --------------------------------------------------------------------------
# training


def initial_params(exp: ExperimentConfig) -> Parameters:
    return init_params(exp.model, exp.generator.schema, exp.init_seed)


def run_training(exp: ExperimentConfig, days: dict[int, Dataset], hooks=None, on_eval=None) -> TrainResult:
    r = exp.resolved()
    r.validate()
    evals = test_sets(days, r.timeline_days)
    return train(initial_params(exp), days[0], r.train, evals, hooks, on_eval)


def day_aucs(params: Parameters, days: dict[int, Dataset]) -> dict[int, float]:
    return {d: evaluate(params, data)["auc"] for d, data in sorted(days.items()) if d > 0}


# --------------------------------------------------------------------------
# ablations

_LAYER_VARIANT = re.compile(r"^(halve|double|remove)-layer-(\d+)$")
_REG_VARIANT = re.compile(r"^(l1|l2|dropout)=([0-9.eE+-]+)$")


def apply_variant(model: ModelConfig, variant: str, user_group: int | None) -> ModelConfig:
    m = copy.deepcopy(model)
    if variant in ("baseline", "none"):
        return m
    if variant == "user-bias":
        if user_group is None:
            raise ValueError("user-bias variant needs a generator user_group")
        m.use_user_bias = True
        m.user_group = user_group
        return m
    match = _LAYER_VARIANT.match(variant)
    if match:
        op, k = match.group(1), int(match.group(2))
        widths = list(m.hidden_widths)
        if not 1 <= k <= len(widths):
            raise ValueError(f"variant {variant!r}: no hidden layer {k}")
        if op == "halve":
            widths[k - 1] = max(1, widths[k - 1] // 2)
        elif op == "double":
            widths[k - 1] *= 2
        else:
            if len(widths) == 1:
                raise ValueError("cannot remove the only hidden layer")
            del widths[k - 1]
        m.hidden_widths = tuple(widths)
        if not isinstance(m.dropout_keep, (int, float)):
            keeps = list(m.dropout_keep)
            if op == "remove":
                del keeps[k - 1]
            m.dropout_keep = tuple(keeps)
        return m
    match = _REG_VARIANT.match(variant)
    if match:
        kind, val = match.group(1), float(match.group(2))
        if kind == "dropout":
            m.dropout_keep = val
        else:
            setattr(m, kind, val)
        m.validate()
        return m
    raise ValueError(
        f"invalid variant {variant!r}; expected baseline, user-bias, "
        "halve-layer-K, double-layer-K, remove-layer-K, l1=X, l2=X or dropout=KEEP"
    )


@dataclass
class AblationReport:
    variant: str
    seeds: list[int]
    # arm -> seed -> {day: auc at the best step}
    best_auc: dict[str, dict[int, dict[int, float]]]
    best_step: dict[str, dict[int, int | None]]

    def mean_auc(self, arm: str, seed: int) -> float:
        return float(np.mean(list(self.best_auc[arm][seed].values())))

    def paired_deltas(self) -> list[float]:
        return [self.mean_auc("variant", s) - self.mean_auc("baseline", s) for s in self.seeds]

    def rows(self):
        for arm in ("baseline", "variant"):
            for s in self.seeds:
                for d, v in sorted(self.best_auc[arm][s].items()):
                    yield arm, s, d, self.best_step[arm][s], v


def run_ablation(base: ExperimentConfig, variant: str, seeds=None) -> AblationReport:
    """Train baseline and variant on identical data and seeds; compare best test AUC per day."""
    model_v = apply_variant(base.model, variant, base.generator.user_group)
    seeds = [base.seed] if seeds is None else list(seeds)
    best_auc: dict[str, dict[int, dict[int, float]]] = {"baseline": {}, "variant": {}}
    best_step: dict[str, dict[int, int | None]] = {"baseline": {}, "variant": {}}
    for s in seeds:
        exp = copy.deepcopy(base)
        exp.seed = s
        _, days = generate_datasets(exp)
        for arm, model in (("baseline", base.model), ("variant", model_v)):
            e = copy.deepcopy(exp)
            e.model = copy.deepcopy(model)
            # hooks only observe training; the comparison does not need them
            e.train.hooks = ()
            res = run_training(e, days)
            params = res.best_params if res.best_params is not None else res.params
            best_auc[arm][s] = day_aucs(params, days)
            best_step[arm][s] = res.best_step
            log.info("ablation %s seed %d %s: best step %s", variant, s, arm, res.best_step)
    return AblationReport(variant, seeds, best_auc, best_step)
