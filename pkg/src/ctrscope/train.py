"""Adagrad, the mini-batch training loop and its metric timeline."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from ._config import from_mapping
from .data import Dataset, substream
from .errors import NumericError, SchemaError, ShapeError, TrainingDivergedError
from .introspection import sample_rows
from .metrics import auc, logloss
from .net import GradientSet, Parameters, backward_batch, batch_loss, forward_batch, predict

log = logging.getLogger(__name__)

Hook = Callable[[int, Parameters], Any]


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    init_accumulator: float = 1e-4
    batch_size: int = 256
    max_steps: int = 6000
    eval_every: int = 200
    seed: int = 0
    hooks: tuple[str, ...] = ()
    # rows of the training set scored at each eval point
    train_eval_cap: int = 20_000
    # name of the eval set whose AUC picks the best step
    selection_set: str = "test1"
    # stop after this many eval points without improvement; 0 disables
    patience: int = 0

    def __post_init__(self):
        self.hooks = tuple(self.hooks)

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise SchemaError("learning_rate must be >= 0")
        if not self.init_accumulator > 0:
            raise SchemaError("init_accumulator must be > 0")
        if self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1")
        if self.max_steps < 0 or self.eval_every < 1:
            raise SchemaError("max_steps must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hooks"] = list(self.hooks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return from_mapping(cls, d, "train")


@dataclass
class AdagradState:
    accumulators: Parameters

    @classmethod
    def create(cls, params: Parameters, init_accumulator: float) -> AdagradState:
        return cls(params.map(lambda a: np.full_like(a, init_accumulator)))


def _dense_update(theta: np.ndarray, acc: np.ndarray, g: np.ndarray, lr: float) -> None:
    if theta.shape != g.shape or acc.shape != g.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match parameter {theta.shape}")
    # a zero gradient adds +0.0 to acc and subtracts 0.0 from theta, leaving both bit-unchanged
    acc += g * g
    theta -= lr * g / np.sqrt(acc)


def _sparse_update(table: np.ndarray, acc: np.ndarray, rows: np.ndarray, vals: np.ndarray, lr: float) -> None:
    if vals.shape[0] != len(rows) or vals.shape[1:] != table.shape[1:]:
        raise ShapeError("sparse gradient does not match table")
    a = acc[rows] + vals * vals
    acc[rows] = a
    table[rows] -= lr * vals / np.sqrt(a)


def adagrad_step(params: Parameters, state: AdagradState, grads: GradientSet, lr: float):
    """In-place Adagrad update; embedding rows absent from ``grads`` are untouched."""
    acc = state.accumulators
    if len(grads.weights) != len(params.weights):
        raise ShapeError("gradient has wrong number of layers")
    for k in range(len(params.weights)):
        _dense_update(params.weights[k], acc.weights[k], grads.weights[k], lr)
        _dense_update(params.biases[k], acc.biases[k], grads.biases[k], lr)
    for g, (rows, vals) in grads.embeddings.items():
        _sparse_update(params.embeddings[g], acc.embeddings[g], rows, vals, lr)
    if grads.user_bias is not None:
        rows, vals = grads.user_bias
        _sparse_update(params.user_bias[:, None], acc.user_bias[:, None], rows, vals[:, None], lr)
    return params, state


@dataclass
class MetricTimeline:
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    hook_results: dict[str, dict[int, Any]] = field(default_factory=dict)

    def add(self, step: int, dataset: str, metric: str, value: float) -> None:
        self.rows.append((step, dataset, metric, float(value)))

    def __len__(self) -> int:
        return len(self.rows)

    def steps(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def series(self, dataset: str, metric: str = "auc") -> tuple[np.ndarray, np.ndarray]:
        pts = sorted((s, v) for s, d, m, v in self.rows if d == dataset and m == metric)
        return np.array([p[0] for p in pts], dtype=np.int64), np.array([p[1] for p in pts])

    def value(self, step: int, dataset: str, metric: str = "auc") -> float:
        for s, d, m, v in self.rows:
            if s == step and d == dataset and m == metric:
                return v
        raise KeyError((step, dataset, metric))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "dataset", "metric", "value"])
        for s, d, m, v in self.rows:
            w.writerow([s, d, m, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> MetricTimeline:
        r = csv.reader(io.StringIO(text))
        next(r)
        return cls([(int(s), d, m, float(v)) for s, d, m, v in r])


@dataclass
class TrainResult:
    params: Parameters
    timeline: MetricTimeline
    state: AdagradState
    steps_done: int
    best_step: int | None = None
    best_params: Parameters | None = None
    best_value: float = -math.inf


def evaluate(params: Parameters, data: Dataset) -> dict[str, float]:
    p = predict(params, data)
    out = {"logloss": logloss(p, data.labels)}
    if 0 < data.labels.sum() < len(data):
        out["auc"] = auc(p, data.labels)
    return out


def train(
    params: Parameters,
    train_set: Dataset,
    config: TrainConfig,
    eval_sets: Mapping[str, Dataset] | None = None,
    hooks: Mapping[str, Hook] | None = None,
    on_eval: Callable[[int, Parameters, TrainResult], bool | None] | None = None,
) -> TrainResult:
    """Mini-batch Adagrad over seeded epoch permutations.

    Every ``eval_every`` steps the training set (subsampled to
    ``train_eval_cap`` rows, reported as ``train``) and each entry of
    ``eval_sets`` are scored, and the selected hooks run on a frozen copy of
    the parameters.  The step with the best ``selection_set`` AUC is kept in
    ``best_params``.  ``on_eval`` runs after each evaluation and may return
    True to stop.  The input ``params`` are not modified.
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    eval_sets = dict(eval_sets or {})
    hooks = dict(hooks or {})
    if config.hooks:
        missing = [h for h in config.hooks if h not in hooks]
        if missing:
            raise KeyError(f"unknown hooks {missing}")
        hooks = {h: hooks[h] for h in config.hooks}
    params = params.copy()
    state = AdagradState.create(params, config.init_accumulator)
    result = TrainResult(params, MetricTimeline(), state, 0)
    result.timeline.hook_results = {h: {} for h in hooks}
    train_eval = train_set.take(sample_rows(len(train_set), config.train_eval_cap, config.seed))
    dropout_rng = substream(config.seed, "dropout")
    n = len(train_set)
    epoch, perm, pos = 0, None, n
    since_best = 0
    for step in range(1, config.max_steps + 1):
        if pos >= n:
            perm = substream(config.seed, "shuffle", epoch).permutation(n)
            epoch += 1
            pos = 0
        idx = perm[pos : pos + config.batch_size]
        batch_id = pos // config.batch_size
        pos += config.batch_size
        batch = train_set.take(idx)
        try:
            trace = forward_batch(params, batch, train=True, rng=dropout_rng)
        except NumericError:
            raise TrainingDivergedError(step, batch_id) from None
        value = batch_loss(params, trace, batch.labels)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, batch_id)
        grads = backward_batch(params, trace, batch.labels)
        adagrad_step(params, state, grads, config.learning_rate)
        result.steps_done = step
        if step % config.eval_every:
            continue
        for name, data in [("train", train_eval), *eval_sets.items()]:
            for metric, v in evaluate(params, data).items():
                result.timeline.add(step, name, metric, v)
        if hooks:
            snap = params.frozen()
            for name, fn in hooks.items():
                result.timeline.hook_results[name][step] = fn(step, snap)
        if config.selection_set in eval_sets:
            v = result.timeline.value(step, config.selection_set, "auc")
            if v > result.best_value:
                result.best_value, result.best_step = v, step
                result.best_params = params.copy()
                since_best = 0
            else:
                since_best += 1
        stop = on_eval is not None and on_eval(step, params, result)
        log.info("step %d: %s", step, {d: round(v, 5) for s, d, m, v in result.timeline.rows if s == step and m == "auc"})
        if stop or (config.patience and since_best >= config.patience):
            break
    return result
