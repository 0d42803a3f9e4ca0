"""Feature schemas, the synthetic drifting click-log generator, and dataset I/O.

Datasets are stored column-wise: one label vector plus, for every feature
group, a flat id array and CSR-style offsets. ``Instance`` objects are
materialised on demand for per-record APIs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import yaml

from ._config import from_mapping
from .errors import CompatibilityError, DataParseError, SchemaError


@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    name: str
    cardinality: int
    multiplicity: tuple[int, int] = (1, 1)

    @property
    def multi_valued(self) -> bool:
        return self.multiplicity != (1, 1)


@dataclass(frozen=True)
class FeatureSchema:
    groups: tuple[GroupSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise SchemaError("schema has no feature groups")
        for i, g in enumerate(self.groups):
            if g.group_id != i:
                raise SchemaError(f"group ids must be 0..G-1 in order; got {g.group_id} at position {i}")
            if g.cardinality < 1:
                raise SchemaError(f"group {g.name!r}: cardinality must be >= 1")
            lo, hi = g.multiplicity
            if lo < 1 or lo > hi:
                raise SchemaError(f"group {g.name!r}: invalid multiplicity {g.multiplicity}")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise SchemaError("group names must be unique")

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, i: int) -> GroupSpec:
        return self.groups[i]

    def __iter__(self) -> Iterator[GroupSpec]:
        return iter(self.groups)

    def group_id(self, name: str) -> int:
        for g in self.groups:
            if g.name == name:
                return g.group_id
        raise SchemaError(f"no group named {name!r}")

    def to_dict(self) -> dict:
        return {
            "groups": [
                {
                    "group_id": g.group_id,
                    "name": g.name,
                    "cardinality": g.cardinality,
                    "multiplicity": list(g.multiplicity),
                }
                for g in self.groups
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSchema:
        try:
            groups = []
            for i, g in enumerate(d["groups"]):
                mult = g.get("multiplicity", [1, 1])
                if isinstance(mult, int):
                    mult = [mult, mult]
                groups.append(
                    GroupSpec(
                        group_id=int(g.get("group_id", i)),
                        name=str(g["name"]),
                        cardinality=int(g["cardinality"]),
                        multiplicity=(int(mult[0]), int(mult[1])),
                    )
                )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise SchemaError(f"malformed schema: {e}") from e
        return cls(tuple(groups))

    @property
    def schema_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> FeatureSchema:
        try:
            d = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise SchemaError(f"cannot parse schema file {path}: {e}") from e
        if not isinstance(d, dict):
            raise SchemaError(f"schema file {path} is not a mapping")
        return cls.from_dict(d)


def default_schema() -> FeatureSchema:
    """Ten-group desk-scale schema with one very high-cardinality user group."""
    fixed = [50, 100, 200, 500, 1_000, 2_000, 5_000, 10_000]
    groups = [GroupSpec(i, f"cat{i}", c) for i, c in enumerate(fixed)]
    groups.append(GroupSpec(8, "query_words", 5_000, (1, 5)))
    groups.append(GroupSpec(9, "user_id", 200_000))
    return FeatureSchema(tuple(groups))


@dataclass(frozen=True)
class Instance:
    label: int
    features: tuple[tuple[int, ...], ...]

    def validate(self, schema: FeatureSchema) -> None:
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label}")
        if len(self.features) != len(schema):
            raise SchemaError(f"expected {len(schema)} feature groups, got {len(self.features)}")
        for g, ids in zip(schema, self.features):
            lo, hi = g.multiplicity
            if not lo <= len(ids) <= hi:
                raise SchemaError(f"group {g.name!r}: {len(ids)} ids outside multiplicity {g.multiplicity}")
            for i in ids:
                if not 0 <= i < g.cardinality:
                    raise SchemaError(f"group {g.name!r}: id {i} out of range [0, {g.cardinality})")


@dataclass(eq=False)
class Dataset:
    """A day of labelled records in columnar form.

    ``ids[g]`` is the flat id array for group ``g`` and ``offsets[g]`` its
    ``n + 1`` CSR offsets, so instance ``i`` holds
    ``ids[g][offsets[g][i]:offsets[g][i + 1]]``.
    """

    day_index: int
    schema_hash: str
    labels: np.ndarray
    ids: list[np.ndarray]
    offsets: list[np.ndarray]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.ids = [np.asarray(a, dtype=np.int64) for a in self.ids]
        self.offsets = [np.asarray(o, dtype=np.int64) for o in self.offsets]
        n = len(self.labels)
        for o, a in zip(self.offsets, self.ids):
            if len(o) != n + 1 or o[0] != 0 or o[-1] != len(a):
                raise SchemaError("inconsistent CSR offsets in dataset")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_groups(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Instance:
        feats = tuple(
            tuple(int(x) for x in a[o[i] : o[i + 1]]) for a, o in zip(self.ids, self.offsets)
        )
        return Instance(int(self.labels[i]), feats)

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    @property
    def instances(self) -> list[Instance]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.day_index == other.day_index
            and self.schema_hash == other.schema_hash
            and np.array_equal(self.labels, other.labels)
            and len(self.ids) == len(other.ids)
            and all(np.array_equal(a, b) for a, b in zip(self.ids, other.ids))
            and all(np.array_equal(a, b) for a, b in zip(self.offsets, other.offsets))
        )

    @classmethod
    def from_instances(
        cls, schema: FeatureSchema, day_index: int, instances: Sequence[Instance]
    ) -> Dataset:
        for inst in instances:
            inst.validate(schema)
        ids, offsets = [], []
        for g in range(len(schema)):
            lens = [len(inst.features[g]) for inst in instances]
            offsets.append(np.concatenate([[0], np.cumsum(lens, dtype=np.int64)]))
            ids.append(np.array([i for inst in instances for i in inst.features[g]], dtype=np.int64))
        labels = np.array([inst.label for inst in instances], dtype=np.int8)
        return cls(day_index, schema.schema_hash, labels, ids, offsets)

    def validate(self, schema: FeatureSchema) -> None:
        if self.schema_hash != schema.schema_hash:
            raise CompatibilityError(
                f"dataset schema hash {self.schema_hash} does not match schema {schema.schema_hash}"
            )
        if self.n_groups != len(schema):
            raise SchemaError("dataset group count differs from schema")
        if not np.isin(self.labels, (0, 1)).all():
            raise SchemaError("labels must be 0/1")
        for g, a, o in zip(schema, self.ids, self.offsets):
            lens = np.diff(o)
            lo, hi = g.multiplicity
            if len(lens) and (lens.min() < lo or lens.max() > hi):
                raise SchemaError(f"group {g.name!r}: id count outside multiplicity {g.multiplicity}")
            if len(a) and (a.min() < 0 or a.max() >= g.cardinality):
                raise SchemaError(f"group {g.name!r}: id out of range")

    def take(self, index: np.ndarray | Sequence[int]) -> Dataset:
        """Row subset, in the order given by ``index``."""
        index = np.asarray(index, dtype=np.int64)
        ids, offsets = [], []
        for a, o in zip(self.ids, self.offsets):
            starts = o[index]
            lens = o[index + 1] - starts
            new_o = np.concatenate([[0], np.cumsum(lens)])
            pos = np.repeat(starts - new_o[:-1], lens) + np.arange(new_o[-1])
            ids.append(a[pos])
            offsets.append(new_o)
        return Dataset(self.day_index, self.schema_hash, self.labels[index], ids, offsets)

    def positive_rate(self) -> float:
        return float(self.labels.mean()) if len(self) else float("nan")


# --------------------------------------------------------------------------
# random streams


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for a named substream of a root seed."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def derive_seed(seed: int, name: str) -> int:
    """Child seed for component ``name``; used to fan one root seed out."""
    return int(substream(seed, "derive", name).integers(0, 2**63 - 1))


# --------------------------------------------------------------------------
# generator


@dataclass
class GeneratorConfig:
    schema: FeatureSchema = field(default_factory=default_schema)
    base_logit: float = -3.4
    weight_scale: float = 0.5
    drift_trend: float = 0.01
    drift_weekly: float = 0.6
    period: int = 7
    user_group: int | None = 9
    # std of the user group's latent weights; None means weight_scale
    user_weight_scale: float | None = None
    zipf_exponent: float = 1.1
    seed: int = 0

    def validate(self) -> None:
        if not math.isfinite(self.base_logit):
            raise SchemaError("base_logit must be finite")
        if self.weight_scale < 0:
            raise SchemaError("weight_scale must be >= 0")
        if self.drift_trend < 0 or self.drift_weekly < 0:
            raise SchemaError("drift coefficients must be >= 0")
        if self.period < 1:
            raise SchemaError("period must be >= 1")
        if self.user_group is not None and not 0 <= self.user_group < len(self.schema):
            raise SchemaError(f"user_group {self.user_group} not in schema")
        if self.user_weight_scale is not None and self.user_weight_scale < 0:
            raise SchemaError("user_weight_scale must be >= 0")

    def group_scale(self, g: int) -> float:
        if g == self.user_group and self.user_weight_scale is not None:
            return self.user_weight_scale
        return self.weight_scale

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema"] = self.schema.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        d = dict(d)
        schema = FeatureSchema.from_dict(d.pop("schema")) if "schema" in d else default_schema()
        return from_mapping(cls, d, "generator", schema=schema)


@dataclass
class GroundTruth:
    """Latent per-id logit weights, base and per-residue perturbations."""

    config: GeneratorConfig
    base: list[np.ndarray]
    perturbations: list[list[np.ndarray]]  # [residue][group]

    def drift(self, day: int) -> float:
        c = self.config
        rho = c.drift_trend * day + c.drift_weekly * math.sin(math.pi * day / c.period) ** 2
        return min(max(rho, 0.0), 1.0)

    def day_weights(self, day: int) -> list[np.ndarray]:
        rho = self.drift(day)
        if rho == 0.0:
            return self.base
        u = self.perturbations[day % self.config.period]
        keep = math.sqrt(1.0 - rho * rho)
        return [keep * w + rho * p for w, p in zip(self.base, u)]


def build_ground_truth(config: GeneratorConfig) -> GroundTruth:
    config.validate()
    rng = substream(config.seed, "ground-truth")
    base = [rng.normal(0.0, 1.0, g.cardinality) * config.group_scale(g.group_id) for g in config.schema]
    perturbations = []
    for _ in range(config.period):
        perturbations.append(
            [rng.normal(0.0, 1.0, g.cardinality) * config.group_scale(g.group_id) for g in config.schema]
        )
    return GroundTruth(config, base, perturbations)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def click_probability(truth: GroundTruth, instance: Instance, day: int) -> float:
    w = truth.day_weights(day)
    logit = truth.config.base_logit
    for g, ids in enumerate(instance.features):
        for i in ids:
            logit += w[g][i]
    return float(_sigmoid(logit))


def click_probabilities(truth: GroundTruth, dataset: Dataset, day: int) -> np.ndarray:
    """Vectorised ``click_probability`` over every row of ``dataset``."""
    w = truth.day_weights(day)
    logit = np.full(len(dataset), truth.config.base_logit)
    if len(dataset) == 0:
        return logit
    for g, (a, o) in enumerate(zip(dataset.ids, dataset.offsets)):
        logit += np.add.reduceat(w[g][a], o[:-1]) if len(a) != len(dataset) else w[g][a]
    return _sigmoid(logit)


@lru_cache(maxsize=64)
def _zipf_cdf(cardinality: int, exponent: float) -> np.ndarray:
    p = np.arange(1, cardinality + 1, dtype=np.float64) ** -exponent
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    return cdf


def sample_features(schema: FeatureSchema, n: int, seed: int, zipf_exponent: float = 1.1) -> Dataset:
    """Draw feature ids only (labels zero), day-independent.

    Each instance consumes a fixed-width block of uniforms, so instance i is
    identical for every ``n > i``.
    """
    widths = [(1 if g.multi_valued else 0) + g.multiplicity[1] for g in schema]
    u = substream(seed, "features").random((n, sum(widths)))
    ids, offsets = [], []
    col = 0
    for g, w in zip(schema, widths):
        cdf = _zipf_cdf(g.cardinality, zipf_exponent)
        lo, hi = g.multiplicity
        if g.multi_valued:
            m = lo + np.minimum((u[:, col] * (hi - lo + 1)).astype(np.int64), hi - lo)
            draws = u[:, col + 1 : col + w]
        else:
            m = np.ones(n, dtype=np.int64)
            draws = u[:, col : col + 1]
        mask = np.arange(hi)[None, :] < m[:, None]
        chosen = np.searchsorted(cdf, draws[mask], side="right")
        ids.append(np.minimum(chosen, g.cardinality - 1))
        offsets.append(np.concatenate([[0], np.cumsum(m)]))
        col += w
    return Dataset(0, schema.schema_hash, np.zeros(n, dtype=np.int8), ids, offsets)


def sample_day(truth: GroundTruth, day: int, n: int, seed: int) -> Dataset:
    """Generate ``n`` labelled records for ``day``.

    Feature draws depend only on ``seed``; labels use a separate stream keyed
    by ``(seed, day)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = truth.config
    ds = sample_features(cfg.schema, n, seed, cfg.zipf_exponent)
    p = click_probabilities(truth, ds, day)
    u = substream(seed, "labels", day).random(n)
    ds.labels = (u < p).astype(np.int8)
    ds.day_index = day
    return ds


# --------------------------------------------------------------------------
# I/O


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(f"#schema {dataset.schema_hash} day={dataset.day_index}\n")
        lists = [a.tolist() for a in dataset.ids]
        offs = [o.tolist() for o in dataset.offsets]
        for i, y in enumerate(dataset.labels.tolist()):
            fields = [str(y)]
            for g in range(dataset.n_groups):
                seg = lists[g][offs[g][i] : offs[g][i + 1]]
                fields.append(f"{g}:" + ",".join(map(str, seg)))
            f.write("\t".join(fields) + "\n")


def read_dataset(path: str | Path, schema: FeatureSchema | None = None) -> Dataset:
    """Read a dataset file; with ``schema`` given, check hash and id ranges."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        header = f.readline()
        parts = header.split()
        if len(parts) != 3 or parts[0] != "#schema" or not parts[2].startswith("day="):
            raise DataParseError(f"bad header {header.strip()!r}", line=1)
        schema_hash = parts[1]
        try:
            day = int(parts[2][4:])
        except ValueError:
            raise DataParseError(f"bad day in header {header.strip()!r}", line=1) from None
        if schema is not None and schema.schema_hash != schema_hash:
            raise CompatibilityError(
                f"{path}: schema hash {schema_hash} does not match {schema.schema_hash}"
            )
        n_groups = len(schema) if schema is not None else None
        labels: list[int] = []
        flat: list[list[int]] = []
        lens: list[list[int]] = []
        for lineno, line in enumerate(f, start=2):
            if not line.endswith("\n"):
                raise DataParseError("truncated record (missing newline)", line=lineno)
            fields = line.rstrip("\n").split("\t")
            if n_groups is None:
                n_groups = len(fields) - 1
                flat = [[] for _ in range(n_groups)]
                lens = [[] for _ in range(n_groups)]
            elif not flat:
                flat = [[] for _ in range(n_groups)]
                lens = [[] for _ in range(n_groups)]
            if len(fields) != n_groups + 1:
                raise DataParseError(f"expected {n_groups + 1} fields, got {len(fields)}", line=lineno)
            if fields[0] not in ("0", "1"):
                raise DataParseError(f"bad label {fields[0]!r}", line=lineno)
            labels.append(int(fields[0]))
            for g, fld in enumerate(fields[1:]):
                gid, sep, body = fld.partition(":")
                if not sep or gid != str(g) or not body:
                    raise DataParseError(f"bad group field {fld!r}", line=lineno)
                try:
                    vals = [int(x) for x in body.split(",")]
                except ValueError:
                    raise DataParseError(f"bad id list {body!r}", line=lineno) from None
                flat[g].extend(vals)
                lens[g].append(len(vals))
    if n_groups is None:
        n_groups = 0
    if not flat:
        flat = [[] for _ in range(n_groups)]
        lens = [[] for _ in range(n_groups)]
    ds = Dataset(
        day,
        schema_hash,
        np.array(labels, dtype=np.int8),
        [np.array(a, dtype=np.int64) for a in flat],
        [np.concatenate([[0], np.cumsum(np.array(ln, dtype=np.int64))]) for ln in lens],
    )
    if schema is not None:
        ds.validate(schema)
    return ds


def dataset_filename(day: int) -> str:
    return f"day{day}.tsv"


def iter_days(n_days: int) -> Iterable[int]:
    """Training day 0 followed by test days 1..n_days."""
    return range(n_days + 1)
