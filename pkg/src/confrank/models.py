"""Sparse CTR predictors (LR, FM, DeepFM-lite) over a single flat parameter vector.

Parameter layout, in order (F fields, H hash_dim, k embedding_dim, m hidden units):

    bias            1
    linear          F*H          offset 1 + f*H + index
    embeddings      F*H*k        FM and DEEPFM only; row f*H + index
    mlp_w1          F*k*m        DEEPFM only; row-major (F*k, m)
    mlp_b1          m
    mlp_w2          m
    mlp_b2          1

Parameters are stored as float32; every forward/backward computation runs in
float64 on a gathered copy, so float64 parameter vectors work too (the
gradient checks rely on this).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .exceptions import (
    DataError,
    NumericalError,
    SnapshotChecksumError,
    SnapshotDescriptorError,
    SnapshotTruncatedError,
)

KINDS = ("lr", "fm", "deepfm")
SNAPSHOT_FORMAT_VERSION = 1
_MAGIC = b"CONFRANK-SNAPSHOT\n"


@dataclass(frozen=True)
class ArchDescriptor:
    kind: str
    field_count: int
    hash_dim: int
    embedding_dim: int = 8
    hidden_units: int = 64

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.field_count < 1 or self.hash_dim < 2:
            raise ValueError("field_count must be >= 1 and hash_dim >= 2")
        if self.embedding_dim < 1 or self.hidden_units < 1:
            raise ValueError("embedding_dim and hidden_units must be positive")

    @property
    def has_embeddings(self) -> bool:
        return self.kind in ("fm", "deepfm")

    @property
    def has_mlp(self) -> bool:
        return self.kind == "deepfm"

    def layout(self) -> dict[str, tuple[int, int]]:
        """Named ``(start, stop)`` ranges into the flat parameter vector."""
        F, H, k, m = self.field_count, self.hash_dim, self.embedding_dim, self.hidden_units
        sizes = [("bias", 1), ("linear", F * H)]
        if self.has_embeddings:
            sizes.append(("embeddings", F * H * k))
        if self.has_mlp:
            sizes += [("mlp_w1", F * k * m), ("mlp_b1", m), ("mlp_w2", m), ("mlp_b2", 1)]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = (start, start + size)
            start += size
        return out

    @property
    def param_count(self) -> int:
        F, H, k, m = self.field_count, self.hash_dim, self.embedding_dim, self.hidden_units
        count = 1 + F * H
        if self.has_embeddings:
            count += F * H * k
        if self.has_mlp:
            count += F * k * m + 2 * m + 1
        return count

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "field_count": self.field_count,
            "hash_dim": self.hash_dim,
            "embedding_dim": self.embedding_dim,
            "hidden_units": self.hidden_units,
        }


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    arch: ArchDescriptor
    version: int
    params: np.ndarray
    rng_seed: int

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float32, copy=True)
        if params.shape != (self.arch.param_count,):
            raise SnapshotDescriptorError(
                f"params length {params.size} does not match descriptor count {self.arch.param_count}"
            )
        bad = np.flatnonzero(~np.isfinite(params))
        if bad.size:
            raise NumericalError(f"non-finite parameter at offset {int(bad[0])}")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    def bit_equal(self, other: "ModelSnapshot") -> bool:
        return (
            self.arch == other.arch
            and self.version == other.version
            and self.rng_seed == other.rng_seed
            and self.params.tobytes() == other.params.tobytes()
        )

    def with_params(self, params, version=None) -> "ModelSnapshot":
        return ModelSnapshot(
            self.arch, self.version + 1 if version is None else version, params, self.rng_seed
        )


class GradientBuffer:
    """Dense gradient accumulator that remembers which offsets were written."""

    def __init__(self, size: int):
        self.values = np.zeros(size, dtype=np.float64)
        self.touched = np.zeros(size, dtype=bool)
        self.count = 0

    def __len__(self):
        return self.values.size

    def add(self, offsets, values) -> None:
        # offsets must be unique within one call
        self.values[offsets] += values
        self.touched[offsets] = True

    def touched_offsets(self) -> np.ndarray:
        return np.flatnonzero(self.touched)

    def clear(self) -> None:
        idx = self.touched_offsets()
        self.values[idx] = 0.0
        self.touched[idx] = False
        self.count = 0


def _uniform(rng, bound, size):
    return rng.uniform(-bound, bound, size=size)


def init_snapshot(arch: ArchDescriptor, seed: int = 0) -> ModelSnapshot:
    """Zero bias/linear/MLP-bias; Glorot-uniform embeddings and MLP weights."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = np.zeros(arch.param_count, dtype=np.float64)
    lay = arch.layout()
    F, H, k, m = arch.field_count, arch.hash_dim, arch.embedding_dim, arch.hidden_units
    if arch.has_embeddings:
        s, e = lay["embeddings"]
        params[s:e] = _uniform(rng, math.sqrt(6.0 / (H + k)), e - s)
    if arch.has_mlp:
        s, e = lay["mlp_w1"]
        params[s:e] = _uniform(rng, math.sqrt(6.0 / (F * k + m)), e - s)
        s, e = lay["mlp_w2"]
        params[s:e] = _uniform(rng, math.sqrt(6.0 / (m + 1)), e - s)
    return ModelSnapshot(arch, 0, params, seed)


class ForwardCache(NamedTuple):
    rows: np.ndarray  # (n, F) flat per-field row ids f*H + index
    emb: np.ndarray | None  # (n, F, k)
    emb_sum: np.ndarray | None  # (n, k)
    hidden_pre: np.ndarray | None  # (n, m)
    hidden: np.ndarray | None  # (n, m)


def _check_indices(arch: ArchDescriptor, indices) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim == 1:
        indices = indices[None, :]
    if indices.ndim != 2 or indices.shape[1] != arch.field_count:
        raise DataError(
            f"expected indices of shape (n, {arch.field_count}), got {indices.shape}"
        )
    if indices.size and (indices.min() < 0 or indices.max() >= arch.hash_dim):
        raise DataError(f"feature index out of range [0, {arch.hash_dim})")
    return indices


def _mlp_params(arch, params, lay):
    F, k, m = arch.field_count, arch.embedding_dim, arch.hidden_units
    w1 = params[slice(*lay["mlp_w1"])].astype(np.float64).reshape(F * k, m)
    b1 = params[slice(*lay["mlp_b1"])].astype(np.float64)
    w2 = params[slice(*lay["mlp_w2"])].astype(np.float64)
    b2 = float(params[lay["mlp_b2"][0]])
    return w1, b1, w2, b2


def forward_batch(arch: ArchDescriptor, params: np.ndarray, indices) -> tuple[np.ndarray, ForwardCache]:
    """Logits for a batch of index rows, plus the activations ``backward_batch`` needs."""
    indices = _check_indices(arch, indices)
    n, F = indices.shape
    lay = arch.layout()
    rows = indices + np.arange(F, dtype=np.int64)[None, :] * arch.hash_dim
    logits = float(params[0]) + params[1 + rows].astype(np.float64).sum(axis=1)
    emb = emb_sum = pre = hidden = None
    if arch.has_embeddings:
        k = arch.embedding_dim
        table = params[slice(*lay["embeddings"])].reshape(F * arch.hash_dim, k)
        emb = table[rows].astype(np.float64)
        emb_sum = emb.sum(axis=1)
        logits = logits + 0.5 * ((emb_sum**2).sum(axis=1) - (emb**2).sum(axis=(1, 2)))
    if arch.has_mlp:
        w1, b1, w2, b2 = _mlp_params(arch, params, lay)
        pre = emb.reshape(n, -1) @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        logits = logits + hidden @ w2 + b2
    return logits, ForwardCache(rows, emb, emb_sum, pre, hidden)


def _scatter_rows(row_ids: np.ndarray, grads: np.ndarray, width: int):
    """Sum ``grads`` (len(row_ids) x width) by row id; returns (unique rows, sums)."""
    uniq, inv = np.unique(row_ids, return_inverse=True)
    inv = inv.ravel()
    if width == 1:
        return uniq, np.bincount(inv, weights=grads.ravel(), minlength=uniq.size)
    flat = (inv[:, None] * width + np.arange(width)[None, :]).ravel()
    sums = np.bincount(flat, weights=grads.ravel(), minlength=uniq.size * width)
    return uniq, sums.reshape(uniq.size, width)


def backward_batch(
    arch: ArchDescriptor,
    params: np.ndarray,
    upstream,
    cache: ForwardCache,
    out: GradientBuffer | None = None,
) -> GradientBuffer:
    """Accumulate ``sum_i upstream_i * d logit_i / d params`` into ``out``.

    Only parameters reachable from the batch's indices (plus the dense MLP block)
    are written.
    """
    if out is None:
        out = GradientBuffer(arch.param_count)
    g = np.asarray(upstream, dtype=np.float64)
    n, F = cache.rows.shape
    if g.shape != (n,):
        raise ValueError(f"upstream must have shape ({n},), got {g.shape}")
    lay = arch.layout()
    out.add(np.array([0]), np.array([g.sum()]))
    uniq, sums = _scatter_rows(cache.rows, np.repeat(g, F), 1)
    out.add(1 + uniq, sums)
    if arch.has_embeddings:
        k = arch.embedding_dim
        # d/dv_f of 0.5*[(sum v)^2 - sum v^2] = sum v - v_f
        d_emb = g[:, None, None] * (cache.emb_sum[:, None, :] - cache.emb)
        if arch.has_mlp:
            w1, _, w2, _ = _mlp_params(arch, params, lay)
            d_pre = (g[:, None] * w2[None, :]) * (cache.hidden_pre > 0)
            d_emb = d_emb + (d_pre @ w1.T).reshape(n, F, k)
            flat_emb = cache.emb.reshape(n, -1)
            out.add(np.arange(*lay["mlp_w1"]), (flat_emb.T @ d_pre).ravel())
            out.add(np.arange(*lay["mlp_b1"]), d_pre.sum(axis=0))
            out.add(np.arange(*lay["mlp_w2"]), cache.hidden.T @ g)
            out.add(np.arange(*lay["mlp_b2"]), np.array([g.sum()]))
        uniq, sums = _scatter_rows(cache.rows.ravel(), d_emb.reshape(-1, k), k)
        start = lay["embeddings"][0]
        offsets = start + (uniq[:, None] * k + np.arange(k)[None, :]).ravel()
        out.add(offsets, sums.ravel())
    out.count += 1
    return out


def _example_indices(example) -> np.ndarray:
    return np.asarray(getattr(example, "indices", example), dtype=np.int64)[None, :]


def forward(snapshot: ModelSnapshot, example) -> float:
    """Logit for one example (an ``Example`` or a sequence of per-field indices)."""
    logits, _ = forward_batch(snapshot.arch, snapshot.params, _example_indices(example))
    return float(logits[0])


def predict_logits(snapshot: ModelSnapshot, indices, chunk_size: int = 65536) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        return np.zeros(0, dtype=np.float64)
    parts = [
        forward_batch(snapshot.arch, snapshot.params, indices[s : s + chunk_size])[0]
        for s in range(0, len(indices), chunk_size)
    ]
    return np.concatenate(parts)


def backward(snapshot: ModelSnapshot, example, upstream: float) -> GradientBuffer:
    """Gradient of ``upstream * logit`` for one example."""
    indices = _example_indices(example)
    _, cache = forward_batch(snapshot.arch, snapshot.params, indices)
    return backward_batch(snapshot.arch, snapshot.params, np.array([upstream]), cache)


@dataclass
class AdagradState:
    """Per-parameter squared-gradient accumulators; owned by one trainer."""

    size: int
    learning_rate: float = 0.05
    eps: float = 1e-8
    initial_accumulator: float = 0.0
    accum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.accum is None:
            self.accum = np.full(self.size, self.initial_accumulator, dtype=np.float64)

    def copy(self) -> "AdagradState":
        return AdagradState(
            self.size, self.learning_rate, self.eps, self.initial_accumulator, self.accum.copy()
        )


def adagrad_step(params: np.ndarray, grads: GradientBuffer, state: AdagradState) -> None:
    """In-place Adagrad on the touched offsets of ``grads``."""
    idx = grads.touched_offsets()
    g = grads.values[idx]
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NumericalError(f"non-finite gradient at parameter offset {int(idx[bad[0]])}")
    acc = state.accum[idx] + g * g
    with np.errstate(over="ignore", invalid="ignore"):
        updated = params[idx] - state.learning_rate * g / (np.sqrt(acc) + state.eps)
    limit = np.finfo(params.dtype).max if params.dtype.kind == "f" else np.inf
    bad = np.flatnonzero(~(np.abs(updated) <= limit))
    if bad.size:
        raise NumericalError(f"update overflows parameter offset {int(idx[bad[0]])}")
    state.accum[idx] = acc
    params[idx] = updated


def apply_update(snapshot: ModelSnapshot, grads: GradientBuffer, state: AdagradState) -> ModelSnapshot:
    """Return a new snapshot (version + 1) after one Adagrad step; ``snapshot`` is untouched."""
    if len(grads) != snapshot.arch.param_count or state.size != snapshot.arch.param_count:
        raise ValueError("gradient/optimizer size does not match the snapshot")
    params = snapshot.params.copy()
    adagrad_step(params, grads, state)
    return snapshot.with_params(params)


def save_snapshot(snapshot: ModelSnapshot, path) -> None:
    """Write magic line, u64 manifest length, JSON manifest, float32 LE payload."""
    payload = snapshot.params.astype("<f4").tobytes()
    manifest = {
        "format_version": SNAPSHOT_FORMAT_VERSION,
        "arch": snapshot.arch.to_dict(),
        "version": int(snapshot.version),
        "rng_seed": int(snapshot.rng_seed),
        "param_count": int(snapshot.params.size),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(blob)) + blob + payload)


def load_snapshot(path) -> ModelSnapshot:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        if _MAGIC.startswith(data):
            raise SnapshotTruncatedError(f"{path}: truncated header")
        raise SnapshotDescriptorError(f"{path}: not a snapshot file")
    pos = len(_MAGIC)
    if len(data) < pos + 8:
        raise SnapshotTruncatedError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + mlen:
        raise SnapshotTruncatedError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
        arch = ArchDescriptor(**manifest["arch"])
        count = int(manifest["param_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SnapshotDescriptorError(f"{path}: bad manifest: {exc}") from None
    if manifest.get("format_version") != SNAPSHOT_FORMAT_VERSION:
        raise SnapshotDescriptorError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    payload = data[pos + mlen :]
    if len(payload) < 4 * count:
        raise SnapshotTruncatedError(
            f"{path}: payload has {len(payload)} bytes, manifest promises {4 * count}"
        )
    if count != arch.param_count or len(payload) != 4 * count:
        raise SnapshotDescriptorError(
            f"{path}: descriptor {arch.kind} needs {arch.param_count} parameters, "
            f"file holds {len(payload) // 4}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise SnapshotChecksumError(f"{path}: payload checksum mismatch")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return ModelSnapshot(arch, int(manifest["version"]), params, int(manifest["rng_seed"]))
