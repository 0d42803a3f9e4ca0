"""Sparse-embedding feed-forward CTR network with hand-written backprop.

Everything runs on whole mini-batches (a ``Dataset`` slice); the
single-instance functions wrap a batch of one.  Dense weights are stored as
``(out, in)`` matrices so a layer computes ``h @ W.T + b``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from ._config import from_mapping
from .data import Dataset, FeatureSchema, Instance, substream
from .errors import CompatibilityError, NumericError, SchemaError, ShapeError

PCTR_CLAMP = 1e-7
EMBEDDING_INIT = 0.05


@dataclass
class ModelConfig:
    embedding_dim: int = 8
    hidden_widths: tuple[int, ...] = (256, 128, 64, 32)
    use_user_bias: bool = False
    user_group: int | None = None
    dropout_keep: float | tuple[float, ...] = 1.0
    l1: float = 0.0
    l2: float = 0.0
    # the per-user bias enters the logit as user_bias_scale * user_bias[id];
    # the fixed multiplier lets Adagrad move the scalar biases at a useful rate
    user_bias_scale: float = 30.0

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if isinstance(self.dropout_keep, list):
            self.dropout_keep = tuple(self.dropout_keep)

    def validate(self, schema: FeatureSchema | None = None) -> None:
        if self.embedding_dim < 1:
            raise SchemaError("embedding_dim must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise SchemaError("hidden_widths must be a non-empty list of positive ints")
        if self.use_user_bias and self.user_group is None:
            raise SchemaError("use_user_bias requires user_group")
        for k in self.keep_probs():
            if not 0.0 < k <= 1.0:
                raise SchemaError(f"dropout keep probability {k} outside (0, 1]")
        if self.l1 < 0 or self.l2 < 0:
            raise SchemaError("l1/l2 must be >= 0")
        if schema is not None and self.user_group is not None and not 0 <= self.user_group < len(schema):
            raise SchemaError(f"user_group {self.user_group} not in schema")

    def keep_probs(self) -> list[float]:
        if isinstance(self.dropout_keep, (int, float)):
            return [float(self.dropout_keep)] * len(self.hidden_widths)
        keeps = [float(k) for k in self.dropout_keep]
        if len(keeps) != len(self.hidden_widths):
            raise SchemaError("dropout_keep needs one value per hidden layer")
        return keeps

    def embedded_groups(self, schema: FeatureSchema) -> tuple[int, ...]:
        skip = self.user_group if self.use_user_bias else None
        return tuple(g.group_id for g in schema if g.group_id != skip)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        if isinstance(self.dropout_keep, tuple):
            d["dropout_keep"] = list(self.dropout_keep)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return from_mapping(cls, d, "model")


@dataclass
class Parameters:
    """Embedding tables, dense layers and the optional per-user bias.

    ``weights[k]`` / ``biases[k]`` hold layer ``k + 1``; the last entry is the
    scalar output layer.
    """

    config: ModelConfig
    groups: tuple[int, ...]
    embeddings: dict[int, np.ndarray]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    user_bias: np.ndarray | None = None

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def group_slice(self, group_id: int) -> slice:
        d = self.config.embedding_dim
        j = self.groups.index(group_id)
        return slice(j * d, (j + 1) * d)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for g in self.groups:
            yield f"emb/{g}", self.embeddings[g]
        for k, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            yield f"W/{k}", w
            yield f"b/{k}", b
        if self.user_bias is not None:
            yield "user_bias", self.user_bias

    def effective_user_bias(self) -> np.ndarray | None:
        """Per-user logit offsets as they enter the output layer."""
        if self.user_bias is None:
            return None
        return self.config.user_bias_scale * self.user_bias

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> Parameters:
        return Parameters(
            self.config,
            self.groups,
            {g: fn(e) for g, e in self.embeddings.items()},
            [fn(w) for w in self.weights],
            [fn(b) for b in self.biases],
            None if self.user_bias is None else fn(self.user_bias),
        )

    def copy(self) -> Parameters:
        return self.map(np.copy)

    def frozen(self) -> Parameters:
        """Read-only copy handed to introspection hooks."""

        def ro(a):
            a = a.copy()
            a.flags.writeable = False
            return a

        return self.map(ro)

    def equals(self, other: Parameters) -> bool:
        a = list(self.named_tensors())
        b = list(other.named_tensors())
        return len(a) == len(b) and all(
            na == nb and x.shape == y.shape and np.array_equal(x, y) for (na, x), (nb, y) in zip(a, b)
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class GradientSet:
    """Gradients co-shaped with ``Parameters``.

    Embedding and user-bias gradients are sparse: ``(rows, values)`` pairs
    covering exactly the ids present in the batch.  ``g0`` is the gradient
    with respect to the concatenated embedding input ``h0`` (one row per
    instance).
    """

    embeddings: dict[int, tuple[np.ndarray, np.ndarray]]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    user_bias: tuple[np.ndarray, np.ndarray] | None
    g0: np.ndarray

    def dense_embedding(self, params: Parameters, group_id: int) -> np.ndarray:
        out = np.zeros_like(params.embeddings[group_id])
        rows, vals = self.embeddings[group_id]
        out[rows] = vals
        return out

    def dense_user_bias(self, params: Parameters) -> np.ndarray | None:
        if params.user_bias is None:
            return None
        out = np.zeros_like(params.user_bias)
        if self.user_bias is not None:
            rows, vals = self.user_bias
            out[rows] = vals
        return out


@dataclass
class BatchTrace:
    batch: Dataset
    h0: np.ndarray
    z: list[np.ndarray]
    h: list[np.ndarray]
    logit: np.ndarray
    pctr: np.ndarray
    dropout_masks: list[np.ndarray] | None = None


@dataclass
class ForwardTrace:
    """Per-layer values for one instance; ``z[k-1]``/``h[k-1]`` are layer k."""

    instance: Instance
    h0: np.ndarray
    z: list[np.ndarray]
    h: list[np.ndarray]
    logit: float
    pctr: float
    dropout_masks: list[np.ndarray] | None = None


# --------------------------------------------------------------------------
# construction


def init_params(config: ModelConfig, schema: FeatureSchema, seed: int) -> Parameters:
    """Glorot-uniform dense weights, small uniform embeddings, zero biases."""
    config.validate(schema)
    rng = substream(seed, "init-params")
    groups = config.embedded_groups(schema)
    d = config.embedding_dim
    embeddings = {
        g: rng.uniform(-EMBEDDING_INIT, EMBEDDING_INIT, (schema[g].cardinality, d)) for g in groups
    }
    dims = [len(groups) * d, *config.hidden_widths, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    user_bias = None
    if config.use_user_bias:
        user_bias = np.zeros(schema[config.user_group].cardinality)
    return Parameters(config, groups, embeddings, weights, biases, user_bias)


def _pool(table: np.ndarray, ids: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    n = len(offsets) - 1
    if len(ids) and (ids.min() < 0 or ids.max() >= len(table)):
        raise IndexError(f"feature id out of range [0, {len(table)})")
    rows = table[ids]
    if len(ids) == n:
        return rows
    if n == 0:
        return np.zeros((0, table.shape[1]))
    return np.add.reduceat(rows, offsets[:-1], axis=0)


def embed_batch(params: Parameters, batch: Dataset) -> np.ndarray:
    """Sum-pool each group's embedding rows and concatenate in schema order."""
    parts = [_pool(params.embeddings[g], batch.ids[g], batch.offsets[g]) for g in params.groups]
    return np.concatenate(parts, axis=1) if parts else np.zeros((len(batch), 0))


def _instance_batch(instance: Instance) -> Dataset:
    ids = [np.asarray(f, dtype=np.int64) for f in instance.features]
    offsets = [np.array([0, len(f)]) for f in instance.features]
    return Dataset(0, "", np.array([instance.label]), ids, offsets)


def embed(params: Parameters, instance: Instance) -> np.ndarray:
    return embed_batch(params, _instance_batch(instance))[0]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _user_ids(params: Parameters, batch: Dataset) -> tuple[np.ndarray, np.ndarray]:
    g = params.config.user_group
    return batch.ids[g], batch.offsets[g]


def _check_finite(a: np.ndarray, where: str) -> None:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite value in {where}")


def forward_batch(
    params: Parameters,
    batch: Dataset,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> BatchTrace:
    keeps = params.config.keep_probs()
    use_dropout = train and any(k < 1.0 for k in keeps)
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    h = embed_batch(params, batch)
    _check_finite(h, "embedding layer (h0)")
    h0 = h
    zs, hs, masks = [], [], []
    for k in range(params.n_hidden):
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ params.weights[k].T + params.biases[k]
        _check_finite(z, f"hidden layer {k + 1}")
        h = np.maximum(z, 0.0)
        if use_dropout:
            keep = keeps[k]
            mask = (rng.random(h.shape) < keep) / keep if keep < 1.0 else np.ones_like(h)
            h = h * mask
            masks.append(mask)
        zs.append(z)
        hs.append(h)
    with np.errstate(over="ignore", invalid="ignore"):
        logit = h @ params.weights[-1][0] + params.biases[-1][0]
        if params.user_bias is not None:
            ids, offs = _user_ids(params, batch)
            logit = logit + params.config.user_bias_scale * _pool(params.user_bias[:, None], ids, offs)[:, 0]
    _check_finite(logit, "output layer")
    return BatchTrace(batch, h0, zs, hs, logit, _sigmoid(logit), masks if use_dropout else None)


def forward(
    params: Parameters,
    instance: Instance,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    t = forward_batch(params, _instance_batch(instance), train=mode == "train", rng=rng)
    return ForwardTrace(
        instance,
        t.h0[0],
        [z[0] for z in t.z],
        [h[0] for h in t.h],
        float(t.logit[0]),
        float(t.pctr[0]),
        None if t.dropout_masks is None else [m[0] for m in t.dropout_masks],
    )


def predict(params: Parameters, data: Dataset, chunk: int = 8192) -> np.ndarray:
    """Eval-mode pctr for every row, in chunks to bound memory."""
    out = np.empty(len(data))
    for s in range(0, len(data), chunk):
        idx = np.arange(s, min(s + chunk, len(data)))
        out[idx] = forward_batch(params, data.take(idx)).pctr
    return out


# --------------------------------------------------------------------------
# loss and gradients


def loss(pctr, label):
    """Cross entropy with pctr clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(pctr, PCTR_CLAMP, 1.0 - PCTR_CLAMP)
    out = -(label * np.log(p) + (1 - label) * np.log1p(-p))
    return float(out) if np.ndim(out) == 0 else out


def _scatter_rows(ids: np.ndarray, offsets: np.ndarray, grad: np.ndarray):
    """Accumulate per-instance pooled gradients onto the ids they came from."""
    n = len(offsets) - 1
    rep = grad if len(ids) == n else np.repeat(grad, np.diff(offsets), axis=0)
    rows, inv = np.unique(ids, return_inverse=True)
    vals = np.empty((len(rows), rep.shape[1]))
    for j in range(rep.shape[1]):
        vals[:, j] = np.bincount(inv, weights=rep[:, j], minlength=len(rows))
    return rows, vals


def backprop(
    params: Parameters,
    trace: BatchTrace,
    dlogit: np.ndarray,
    param_grads: bool = True,
    regularize: bool = True,
) -> GradientSet:
    """Push per-instance ``d objective / d logit`` back through the network.

    Parameter gradients are summed over the batch; ``g0`` keeps one row per
    instance.  With ``regularize`` the L1/L2 penalty gradients on dense
    weights are added once.
    """
    if len(trace.z) != params.n_hidden or trace.h0.shape[1] != params.input_dim:
        raise ShapeError("trace does not match parameter shapes")
    if dlogit.shape != trace.logit.shape:
        raise ShapeError("dlogit must have one entry per traced instance")
    L = params.n_hidden
    gw: list[np.ndarray] = [None] * (L + 1)
    gb: list[np.ndarray] = [None] * (L + 1)
    delta = dlogit[:, None]  # (b, 1) gradient wrt layer L+1 pre-activation
    for k in range(L, -1, -1):
        h_in = trace.h0 if k == 0 else trace.h[k - 1]
        if param_grads:
            gw[k] = delta.T @ h_in
            gb[k] = delta.sum(axis=0)
        dh = delta @ params.weights[k]
        if k == 0:
            g0 = dh
            break
        if trace.dropout_masks is not None:
            dh = dh * trace.dropout_masks[k - 1]
        delta = dh * (trace.z[k - 1] > 0)
    emb: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    ub = None
    if param_grads:
        cfg = params.config
        if regularize and (cfg.l1 or cfg.l2):
            for k, w in enumerate(params.weights):
                gw[k] = gw[k] + cfg.l2 * w + cfg.l1 * np.sign(w)
        b = trace.batch
        for g in params.groups:
            emb[g] = _scatter_rows(b.ids[g], b.offsets[g], g0[:, params.group_slice(g)])
        if params.user_bias is not None:
            ids, offs = _user_ids(params, b)
            rows, vals = _scatter_rows(ids, offs, cfg.user_bias_scale * dlogit[:, None])
            ub = (rows, vals[:, 0])
    return GradientSet(emb, gw, gb, ub, g0)


def batch_loss(params: Parameters, trace: BatchTrace, labels: np.ndarray) -> float:
    """Mean cross entropy plus the weight penalty."""
    cfg = params.config
    value = float(np.mean(loss(trace.pctr, labels)))
    if cfg.l2:
        value += 0.5 * cfg.l2 * sum(float(np.sum(w * w)) for w in params.weights)
    if cfg.l1:
        value += cfg.l1 * sum(float(np.sum(np.abs(w))) for w in params.weights)
    return value


def backward_batch(params: Parameters, trace: BatchTrace, labels: np.ndarray) -> GradientSet:
    """Exact gradient of ``batch_loss`` (mean loss over the batch + penalty)."""
    labels = np.asarray(labels, dtype=np.float64)
    dlogit = (trace.pctr - labels) / len(labels)
    return backprop(params, trace, dlogit)


def backward(params: Parameters, trace: ForwardTrace, label: int) -> GradientSet:
    """Gradient of ``loss(pctr, label)`` + penalty for a single instance."""
    if trace.h0.shape != (params.input_dim,) or len(trace.z) != params.n_hidden:
        raise ShapeError("trace does not match parameter shapes")
    bt = BatchTrace(
        _instance_batch(trace.instance),
        trace.h0[None, :],
        [z[None, :] for z in trace.z],
        [h[None, :] for h in trace.h],
        np.array([trace.logit]),
        np.array([trace.pctr]),
        None if trace.dropout_masks is None else [m[None, :] for m in trace.dropout_masks],
    )
    return backward_batch(params, bt, np.array([label]))


def pctr_gradient_h0(params: Parameters, batch: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradient of pctr (not the loss) with respect to h0, plus pctr."""
    t = forward_batch(params, batch)
    g = backprop(params, t, t.pctr * (1.0 - t.pctr), param_grads=False)
    return g.g0, t.pctr


def predict_gradient_h0(params: Parameters, instance: Instance) -> np.ndarray:
    return pctr_gradient_h0(params, _instance_batch(instance))[0][0]


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"CTRSCKPT"
FORMAT_VERSION = 1


def _write_blob(f, data: bytes) -> None:
    f.write(struct.pack("<Q", len(data)))
    f.write(data)


def _read_blob(f) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n)


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CompatibilityError("truncated checkpoint")
    return b


def save_checkpoint(params: Parameters, path: str | Path, schema_hash: str, step: int | None = None) -> None:
    """Versioned binary checkpoint: header, metadata, then raw little-endian tensors."""
    meta = {
        "model": params.config.to_dict(),
        "groups": list(params.groups),
        "schema_hash": schema_hash,
        "step": step,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_blob(buf, json.dumps(meta, sort_keys=True).encode())
    tensors = list(params.named_tensors())
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        _write_blob(buf, name.encode())
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, schema: FeatureSchema | None = None) -> tuple[Parameters, dict]:
    with Path(path).open("rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CompatibilityError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise CompatibilityError(f"unsupported checkpoint version {version}")
        meta = json.loads(_read_blob(f).decode())
        if schema is not None and meta["schema_hash"] != schema.schema_hash:
            raise CompatibilityError(
                f"checkpoint schema hash {meta['schema_hash']} does not match {schema.schema_hash}"
            )
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name = _read_blob(f).decode()
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(_read_exact(f, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    config = ModelConfig.from_dict(meta["model"])
    groups = tuple(meta["groups"])
    n_layers = len(config.hidden_widths) + 1
    try:
        params = Parameters(
            config,
            groups,
            {g: tensors[f"emb/{g}"] for g in groups},
            [tensors[f"W/{k}"] for k in range(1, n_layers + 1)],
            [tensors[f"b/{k}"] for k in range(1, n_layers + 1)],
            tensors.get("user_bias"),
        )
    except KeyError as e:
        raise CompatibilityError(f"checkpoint missing tensor {e}") from None
    return params, meta
