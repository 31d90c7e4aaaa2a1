"""Feature ingestion: hashing, CSV I/O, temporal splits and synthetic drift streams.

Examples are held column-wise in an :class:`ExampleSet` so that batches can be
sliced without materialising per-row objects; :class:`Example` is the row view.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import DataError

MISSING_INDEX = 0
SECONDS_PER_DAY = 86400
MANDATORY_COLUMNS = ("id", "timestamp", "label")

# blake2b personalisation; changing it changes every hashed index.
_HASH_PERSON = b"confrank.v1"


@dataclass(frozen=True)
class FieldSchema:
    field_names: tuple[str, ...]
    hash_dim: int

    def __post_init__(self):
        object.__setattr__(self, "field_names", tuple(self.field_names))
        if not self.field_names:
            raise ValueError("schema needs at least one field")
        if len(set(self.field_names)) != len(self.field_names):
            raise ValueError(f"duplicate field names in {self.field_names}")
        clash = set(self.field_names) & set(MANDATORY_COLUMNS)
        if clash:
            raise ValueError(f"field names collide with mandatory columns: {sorted(clash)}")
        if int(self.hash_dim) < 2:
            raise ValueError(f"hash_dim must be >= 2, got {self.hash_dim}")

    @property
    def field_count(self) -> int:
        return len(self.field_names)


@dataclass(frozen=True)
class Example:
    id: int
    timestamp: int
    label: int
    indices: tuple[int, ...]


class ExampleSet:
    """Immutable column store of examples.

    Parameters
    ----------
    ids, timestamps : array-like of uint64
    labels : array-like of {0, 1}
    indices : array-like of shape (n_examples, field_count)
        Hashed per-field indices in ``[0, hash_dim)``.
    """

    def __init__(self, ids, timestamps, labels, indices, field_count=None):
        ids = np.asarray(ids, dtype=np.uint64)
        timestamps = np.asarray(timestamps, dtype=np.uint64)
        labels = np.asarray(labels, dtype=np.int8)
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim == 1 and indices.size == 0:
            indices = indices.reshape(0, field_count or 0)
        if indices.ndim != 2:
            raise ValueError("indices must be 2-dimensional")
        n = len(ids)
        if not (len(timestamps) == len(labels) == indices.shape[0] == n):
            raise ValueError("column lengths differ")
        if n and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        for arr in (ids, timestamps, labels, indices):
            arr.flags.writeable = False
        self.ids = ids
        self.timestamps = timestamps
        self.labels = labels
        self.indices = indices

    @classmethod
    def empty(cls, field_count: int) -> "ExampleSet":
        return cls([], [], [], np.zeros((0, field_count), dtype=np.int64))

    @classmethod
    def from_examples(cls, examples: Sequence[Example], field_count: int) -> "ExampleSet":
        if not examples:
            return cls.empty(field_count)
        return cls(
            [e.id for e in examples],
            [e.timestamp for e in examples],
            [e.label for e in examples],
            [list(e.indices) for e in examples],
        )

    @property
    def field_count(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Example(
                int(self.ids[key]),
                int(self.timestamps[key]),
                int(self.labels[key]),
                tuple(int(v) for v in self.indices[key]),
            )
        return self.take(np.arange(len(self))[key])

    def take(self, rows) -> "ExampleSet":
        rows = np.asarray(rows, dtype=np.int64)
        return ExampleSet(
            self.ids[rows], self.timestamps[rows], self.labels[rows], self.indices[rows]
        )

    def days(self, time_unit: str = "day") -> np.ndarray:
        return timestamps_to_days(self.timestamps, time_unit)

    def sorted_by_time(self) -> "ExampleSet":
        """Stable order: timestamp, then id."""
        return self.take(np.lexsort((self.ids, self.timestamps)))

    @staticmethod
    def concat(parts: Sequence["ExampleSet"]) -> "ExampleSet":
        if not parts:
            raise ValueError("nothing to concatenate")
        return ExampleSet(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.timestamps for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.indices for p in parts]),
        )

    def equals(self, other: "ExampleSet") -> bool:
        return all(
            np.array_equal(getattr(self, c), getattr(other, c))
            for c in ("ids", "timestamps", "labels", "indices")
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: ExampleSet
    validation: ExampleSet
    test: ExampleSet


def timestamps_to_days(timestamps, time_unit: str = "day") -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.uint64)
    if time_unit == "day":
        return ts.astype(np.int64)
    if time_unit == "seconds":
        return (ts // np.uint64(SECONDS_PER_DAY)).astype(np.int64)
    raise ValueError(f"time_unit must be 'day' or 'seconds', got {time_unit!r}")


def hash_field(field_index: int, raw_value: str, hash_dim: int) -> int:
    """Map a raw categorical value to an index in ``[1, hash_dim)``; empty -> 0.

    Uses 64-bit blake2b over ``"<field_index>\\x1f<value>"`` so the same value in
    different fields lands independently.
    """
    if hash_dim < 2:
        raise ValueError(f"hash_dim must be >= 2, got {hash_dim}")
    if raw_value == "":
        return MISSING_INDEX
    key = f"{field_index}\x1f{raw_value}".encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8, person=_HASH_PERSON).digest()
    return 1 + int.from_bytes(digest, "little") % (hash_dim - 1)


def load_csv(path, schema: FieldSchema) -> ExampleSet:
    """Read ``id,timestamp,label,<fields...>`` rows into an :class:`ExampleSet`.

    Errors cite 1-based physical line numbers (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    ids, timestamps, labels, rows = [], [], [], []
    cache: list[dict[str, int]] = [{} for _ in schema.field_names]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        missing = [c for c in (*MANDATORY_COLUMNS, *schema.field_names) if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        pos = {name: header.index(name) for name in (*MANDATORY_COLUMNS, *schema.field_names)}
        field_pos = [pos[name] for name in schema.field_names]
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {line}: expected {len(header)} columns, got {len(row)}"
                )
            try:
                ids.append(_parse_uint(row[pos["id"]]))
                timestamps.append(_parse_uint(row[pos["timestamp"]]))
            except ValueError as exc:
                raise DataError(f"{path}: line {line}: {exc}") from None
            label = row[pos["label"]].strip()
            if label not in ("0", "1"):
                raise DataError(f"{path}: line {line}: label must be 0 or 1, got {label!r}")
            labels.append(int(label))
            encoded = []
            for f, p in enumerate(field_pos):
                value = row[p]
                idx = cache[f].get(value)
                if idx is None:
                    idx = cache[f][value] = hash_field(f, value, schema.hash_dim)
                encoded.append(idx)
            rows.append(encoded)
    if not ids:
        return ExampleSet.empty(schema.field_count)
    return ExampleSet(ids, timestamps, labels, rows)


def read_csv_header(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        try:
            return next(csv.reader(fh))
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None


def schema_from_csv(path, hash_dim: int) -> FieldSchema:
    header = read_csv_header(path)
    missing = [c for c in MANDATORY_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    return FieldSchema(tuple(c for c in header if c not in MANDATORY_COLUMNS), hash_dim)


def _parse_uint(text: str) -> int:
    text = text.strip()
    if not text.isdigit():
        raise ValueError(f"expected a non-negative integer, got {text!r}")
    value = int(text)
    if value >= 2**64:
        raise ValueError(f"value {value} exceeds 64 bits")
    return value


def temporal_split(
    examples: ExampleSet, validation_days: int = 1, test_days: int = 1, time_unit: str = "day"
) -> DatasetSplit:
    """Last ``test_days`` distinct days -> test, the ``validation_days`` before -> validation."""
    if len(examples) == 0:
        raise DataError("cannot split an empty example set")
    days = examples.days(time_unit)
    distinct = np.unique(days)
    needed = validation_days + test_days + 1
    if len(distinct) < needed:
        raise DataError(
            f"need at least {needed} distinct days for the split, found {len(distinct)}"
        )
    val_start = distinct[len(distinct) - test_days - validation_days]
    test_start = distinct[len(distinct) - test_days]
    train_rows = np.flatnonzero(days < val_start)
    val_rows = np.flatnonzero((days >= val_start) & (days < test_start))
    test_rows = np.flatnonzero(days >= test_start)
    return DatasetSplit(examples.take(train_rows), examples.take(val_rows), examples.take(test_rows))


@dataclass(frozen=True)
class DriftStreamConfig:
    """Synthetic non-stationary stream.

    Each field holds ``cardinality`` raw values with fixed latent vectors.  Day
    ``d`` labels are Bernoulli draws from ``sigmoid(bias + <latent, w_d>)`` where
    ``w_d`` has a static part plus a part rotated by ``drift_rate * d`` radians.
    """

    days: int = 10
    examples_per_day: int = 20000
    drift_rate: float = 0.2
    base_ctr: float = 0.1
    seed: int = 0
    n_fields: int = 8
    cardinality: int = 400
    latent_dim: int = 8
    signal_scale: float = 3.5
    static_share: float = 0.5
    zipf_exponent: float = 1.1
    hash_dim: int = 4096

    def __post_init__(self):
        if self.days < 1 or self.examples_per_day < 1:
            raise ValueError("days and examples_per_day must be positive")
        if not (self.drift_rate >= 0 and math.isfinite(self.drift_rate)):
            raise ValueError(f"drift_rate must be a non-negative finite number, got {self.drift_rate}")
        if not 0.0 < self.base_ctr < 1.0:
            raise ValueError(f"base_ctr must lie in (0, 1), got {self.base_ctr}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_fields < 1 or self.cardinality < 1 or self.latent_dim < 3:
            raise ValueError("n_fields, cardinality >= 1 and latent_dim >= 3 required")
        if not 0.0 <= self.static_share <= 1.0:
            raise ValueError("static_share must lie in [0, 1]")
        if self.hash_dim < 2:
            raise ValueError("hash_dim must be >= 2")

    @property
    def schema(self) -> FieldSchema:
        return FieldSchema(tuple(f"f{i}" for i in range(self.n_fields)), self.hash_dim)


@dataclass(frozen=True)
class DriftStream:
    config: DriftStreamConfig
    examples: ExampleSet
    value_ids: np.ndarray  # raw value id per (example, field)
    true_prob: np.ndarray  # hidden click probability per example

    @property
    def schema(self) -> FieldSchema:
        return self.config.schema

    def day(self, d: int) -> ExampleSet:
        return self.examples.take(np.flatnonzero(self.examples.timestamps == d))

    def days(self, first: int, last: int) -> ExampleSet:
        ts = self.examples.timestamps.astype(np.int64)
        return self.examples.take(np.flatnonzero((ts >= first) & (ts <= last)))

    def to_csv(self, path) -> None:
        write_csv(path, self.examples, self.schema, raw_values=self.value_ids)

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self.config), sort_keys=True) + "\n")


def _latent_weights(cfg: DriftStreamConfig, rng: np.random.Generator):
    """Return (static, a, b): w_d = static + a*cos(theta d) + b*sin(theta d)."""
    q, _ = np.linalg.qr(rng.standard_normal((cfg.latent_dim, cfg.latent_dim)))
    static = q[:, 0] * math.sqrt(cfg.static_share)
    rot = math.sqrt(1.0 - cfg.static_share)
    return static, q[:, 1] * rot, q[:, 2] * rot


def generate_drift_stream(config: DriftStreamConfig) -> DriftStream:
    """Draw the stream; days are numbered 1..days and used as timestamps."""
    cfg = config
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    latent = rng.standard_normal((cfg.n_fields, cfg.cardinality, cfg.latent_dim))
    latent /= math.sqrt(cfg.n_fields * cfg.latent_dim)
    static, rot_a, rot_b = _latent_weights(cfg, rng)
    ranks = np.arange(1, cfg.cardinality + 1, dtype=np.float64)
    popularity = ranks ** -cfg.zipf_exponent
    popularity /= popularity.sum()
    # Value popularity ordering is shuffled per field so fields are not aligned.
    perms = np.stack([rng.permutation(cfg.cardinality) for _ in range(cfg.n_fields)])

    n = cfg.days * cfg.examples_per_day
    value_ids = np.empty((n, cfg.n_fields), dtype=np.int64)
    for f in range(cfg.n_fields):
        value_ids[:, f] = perms[f][rng.choice(cfg.cardinality, size=n, p=popularity)]
    day_of = np.repeat(np.arange(1, cfg.days + 1, dtype=np.int64), cfg.examples_per_day)

    feats = latent[np.arange(cfg.n_fields)[None, :], value_ids].sum(axis=1)  # (n, latent_dim)
    theta = cfg.drift_rate * day_of
    weights = static[None, :] + np.outer(np.cos(theta), rot_a) + np.outer(np.sin(theta), rot_b)
    scale = cfg.signal_scale / max(np.linalg.norm(static + rot_a), 1e-12)
    scores = scale * np.einsum("nd,nd->n", feats, weights)
    bias = _calibrate_bias(scores[: cfg.examples_per_day], cfg.base_ctr)
    true_prob = expit(bias + scores)
    labels = (rng.random(n) < true_prob).astype(np.int8)

    table = np.zeros((cfg.n_fields, cfg.cardinality), dtype=np.int64)
    for f in range(cfg.n_fields):
        for v in range(cfg.cardinality):
            table[f, v] = hash_field(f, f"v{v}", cfg.hash_dim)
    indices = table[np.arange(cfg.n_fields)[None, :], value_ids]
    examples = ExampleSet(np.arange(n, dtype=np.uint64), day_of, labels, indices)
    value_ids.flags.writeable = False
    true_prob.flags.writeable = False
    return DriftStream(cfg, examples, value_ids, true_prob)


def _calibrate_bias(scores: np.ndarray, target: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if expit(mid + scores).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def write_csv(path, examples: ExampleSet, schema: FieldSchema, raw_values=None) -> None:
    """Write examples in the loader's format.

    Without ``raw_values`` the hashed indices are written as the raw values, so
    reloading re-hashes them; pass the original raw ids to round-trip exactly.
    """
    values = examples.indices if raw_values is None else np.asarray(raw_values)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*MANDATORY_COLUMNS, *schema.field_names])
        for i in range(len(examples)):
            writer.writerow(
                [int(examples.ids[i]), int(examples.timestamps[i]), int(examples.labels[i])]
                + [f"v{int(v)}" for v in values[i]]
            )
