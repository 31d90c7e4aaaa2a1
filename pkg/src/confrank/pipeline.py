"""Serve-then-retrain orchestration.

Two regimes:

* one-pass: warm up on the first days, then each following day is served by
  the current snapshot (logits logged), and a successor is trained on that day
  once, in arrival order, with the logged logits as teacher signal;
* standard: multi-epoch training with validation early stopping, where the
  previous epoch's snapshot provides the teacher logits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataError, MissingTeacherError
from .features import DatasetSplit, DriftStream, ExampleSet
from .losses import (
    BatchLogits,
    LossWeights,
    ScoringFunction,
    as_phi,
    ce_loss,
    combined_loss,
    kd_objective,
    rkd_objective,
)
from .metrics import MetricReport, evaluate
from .models import (
    AdagradState,
    ArchDescriptor,
    GradientBuffer,
    ModelSnapshot,
    adagrad_step,
    backward_batch,
    forward_batch,
    init_snapshot,
    predict_logits,
)

OBJECTIVES = ("erm", "cr", "kd", "rkd")
REGIMES = ("one_pass", "standard")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run.

    ``objective`` picks the loss added to cross-entropy once a teacher exists:
    ``cr`` uses ``weights`` (point-wise and relational ranking terms), ``kd``
    and ``rkd`` are the distillation baselines.  ``regime`` picks one-pass
    cycling or standard multi-epoch training.
    """

    arch: ArchDescriptor
    objective: str = "erm"
    regime: str = "standard"
    weights: LossWeights = LossWeights()
    phi: ScoringFunction = ScoringFunction("logistic")
    batch_size: int = 256
    learning_rate: float = 0.05
    adagrad_eps: float = 1e-8
    epochs: int = 10
    delta: float = 1e-4
    seed: int = 0
    kd_alpha: float = 0.5
    kd_temperature: float = 2.0
    rkd_weight: float = 0.5
    warmup_days: int = 1
    cycle_days: int = 0
    warm_start: bool = True
    carry_optimizer_state: bool = False
    time_unit: str = "day"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        object.__setattr__(self, "phi", as_phi(self.phi))
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.regime == "standard" and not self.delta > 0:
            raise ValueError("standard regime needs delta > 0 for early stopping")
        if self.delta < 0 or math.isnan(self.delta):
            raise ValueError("delta must be non-negative")
        if self.warmup_days < 0 or self.cycle_days < 0:
            raise ValueError("day counts must be non-negative")
        if self.objective == "erm" and not self.weights.is_zero:
            raise ValueError("ERM objective takes no ranking weights")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "objective": self.objective,
            "regime": self.regime,
            "lambda_cr": self.weights.lambda_cr,
            "lambda_rcr": self.weights.lambda_rcr,
            "phi": self.phi.kind,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "adagrad_eps": self.adagrad_eps,
            "epochs": self.epochs,
            "delta": self.delta if math.isfinite(self.delta) else "inf",
            "seed": self.seed,
            "kd_alpha": self.kd_alpha,
            "kd_temperature": self.kd_temperature,
            "rkd_weight": self.rkd_weight,
            "warmup_days": self.warmup_days,
            "cycle_days": self.cycle_days,
            "warm_start": self.warm_start,
            "carry_optimizer_state": self.carry_optimizer_state,
            "time_unit": self.time_unit,
        }


def batch_objective(config: TrainConfig, batch: BatchLogits, with_teacher: bool):
    """Loss value and d/d(student logit) for one batch."""
    if not with_teacher or config.objective == "erm":
        return ce_loss(batch)
    if config.objective == "cr":
        return combined_loss(batch, config.weights, config.phi)
    if config.objective == "kd":
        return kd_objective(batch, config.kd_alpha, config.kd_temperature)
    return rkd_objective(batch, config.rkd_weight)


class Trainer:
    """Owns a mutable working copy of a snapshot's parameters and its optimizer.

    Snapshots handed out by :meth:`snapshot` are independent immutable copies.
    """

    def __init__(self, start: ModelSnapshot, config: TrainConfig, optimizer: AdagradState | None = None):
        self.arch = start.arch
        self.config = config
        self.rng_seed = start.rng_seed
        self.version = start.version
        self.params = np.array(start.params, dtype=np.float32, copy=True)
        self.optimizer = optimizer or AdagradState(
            self.arch.param_count, config.learning_rate, config.adagrad_eps
        )
        self._grads = GradientBuffer(self.arch.param_count)
        self.batch_losses: list[float] = []

    def step(self, indices, labels, teacher=None, ids=None) -> float:
        logits, cache = forward_batch(self.arch, self.params, indices)
        batch = BatchLogits(logits, labels, teacher, ids)
        value, grad = batch_objective(self.config, batch, teacher is not None)
        self._grads.clear()
        backward_batch(self.arch, self.params, grad, cache, out=self._grads)
        adagrad_step(self.params, self._grads, self.optimizer)
        self.version += 1
        self.batch_losses.append(value)
        return value

    def snapshot(self) -> ModelSnapshot:
        return ModelSnapshot(self.arch, self.version, self.params, self.rng_seed)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def validation_loss(snapshot: ModelSnapshot, examples: ExampleSet) -> float:
    logits = predict_logits(snapshot, examples.indices)
    return ce_loss(BatchLogits(logits, examples.labels))[0]


def _fit(split: DatasetSplit, config: TrainConfig, use_teacher: bool) -> ModelSnapshot:
    train = split.train
    if len(train) == 0:
        raise DataError("training split is empty")
    start = init_snapshot(config.arch, config.seed)
    trainer = Trainer(start, config)
    if config.regime == "one_pass":
        ordered = train.sorted_by_time()
        for sl in _batches(len(ordered), config.batch_size):
            trainer.step(ordered.indices[sl], ordered.labels[sl])
        return trainer.snapshot()

    if len(split.validation) == 0:
        raise DataError("standard regime needs a non-empty validation split")
    previous = validation_loss(start, split.validation)
    best, best_loss = None, math.inf
    teacher: ModelSnapshot | None = None
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(len(train), config.seed, epoch)
        for sl in _batches(len(order), config.batch_size):
            rows = order[sl]
            idx = train.indices[rows]
            t_logits = predict_logits(teacher, idx) if teacher is not None else None
            trainer.step(idx, train.labels[rows], t_logits, train.ids[rows])
        snap = trainer.snapshot()
        loss = validation_loss(snap, split.validation)
        if loss < best_loss:
            best, best_loss = snap, loss
        if previous - loss < config.delta:
            break
        previous = loss
        if use_teacher:
            teacher = snap
    return best if best is not None else trainer.snapshot()


def train_erm(split: DatasetSplit, config: TrainConfig) -> ModelSnapshot:
    """Cross-entropy training; standard regime returns the best-validation snapshot."""
    return _fit(split, replace(config, objective="erm", weights=LossWeights()), use_teacher=False)


def train_standard_with_teacher(split: DatasetSplit, config: TrainConfig) -> ModelSnapshot:
    """Epoch 1 is plain cross-entropy; later epochs add the configured objective
    with the previous epoch's snapshot as teacher."""
    if config.regime != "standard":
        raise ValueError("train_standard_with_teacher needs regime='standard'")
    return _fit(split, config, use_teacher=True)


class PredictionLog:
    """Append-only (example_id, snapshot_version, online_logit) records."""

    def __init__(self):
        self._ids: list[np.ndarray] = []
        self._versions: list[np.ndarray] = []
        self._logits: list[np.ndarray] = []
        self._index: dict[int, dict[int, float]] = {}

    def __len__(self):
        return sum(a.size for a in self._ids)

    def append(self, example_ids, version: int, logits) -> None:
        ids = np.asarray(example_ids, dtype=np.uint64).ravel()
        logits = np.asarray(logits, dtype=np.float64).ravel()
        if ids.size != logits.size:
            raise ValueError("ids and logits differ in length")
        if not np.isfinite(logits).all():
            raise ValueError("logged logits must be finite")
        seen = self._index.setdefault(int(version), {})
        fresh = {}
        for i, z in zip(ids.tolist(), logits.tolist()):
            if i in seen or i in fresh:
                raise ValueError(f"example {i} already logged for version {version}")
            fresh[i] = z
        seen.update(fresh)
        self._ids.append(ids)
        self._versions.append(np.full(ids.size, version, dtype=np.uint64))
        self._logits.append(logits)

    def records(self):
        if not self._ids:
            return np.zeros(0, np.uint64), np.zeros(0, np.uint64), np.zeros(0)
        return (
            np.concatenate(self._ids),
            np.concatenate(self._versions),
            np.concatenate(self._logits),
        )

    def lookup(self, example_ids, version: int) -> np.ndarray:
        """Logged logits for ``version``; NaN where nothing was logged."""
        table = self._index.get(int(version), {})
        return np.array([table.get(int(i), np.nan) for i in np.asarray(example_ids).ravel()])

    def to_csv(self, path) -> None:
        ids, versions, logits = self.records()
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["example_id", "snapshot_version", "online_logit"])
            for i, v, z in zip(ids.tolist(), versions.tolist(), logits.tolist()):
                writer.writerow([i, v, repr(float(z))])

    @classmethod
    def from_csv(cls, path) -> "PredictionLog":
        log = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            groups: dict[int, tuple[list, list]] = {}
            for row in reader:
                ids, zs = groups.setdefault(int(row["snapshot_version"]), ([], []))
                ids.append(int(row["example_id"]))
                zs.append(float(row["online_logit"]))
        for version, (ids, zs) in groups.items():
            log.append(ids, version, zs)
        return log


@dataclass
class CycleReport:
    day: int
    served_version: int
    produced_version: int
    metrics: MetricReport
    batch_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "day": self.day,
            "served_version": self.served_version,
            "produced_version": self.produced_version,
            "metrics": self.metrics.to_dict(),
            "mean_loss": float(np.mean(self.batch_losses)) if self.batch_losses else None,
            "batch_losses": [float(x) for x in self.batch_losses],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)


def serve_day(snapshot: ModelSnapshot, day_examples: ExampleSet):
    """Log the snapshot's logit for every example and report the day's metrics."""
    log = PredictionLog()
    logits = predict_logits(snapshot, day_examples.indices)
    log.append(day_examples.ids, snapshot.version, logits)
    return log, evaluate(logits, day_examples.labels)


def one_pass_cycle(
    online: ModelSnapshot,
    day_examples: ExampleSet,
    log: PredictionLog,
    config: TrainConfig,
    optimizer: AdagradState | None = None,
):
    """Train the successor of ``online`` on one day, each example once, in time order.

    Teacher logits come from ``log`` for the served version.  ``optimizer`` is
    updated in place when given; otherwise fresh accumulators are used.
    """
    ordered = day_examples.sorted_by_time()
    teacher = log.lookup(ordered.ids, online.version)
    missing = np.flatnonzero(np.isnan(teacher))
    if missing.size:
        raise MissingTeacherError(
            f"no logged logit for example id {int(ordered.ids[missing[0]])} "
            f"under snapshot version {online.version}"
        )
    metrics = evaluate(teacher, ordered.labels)
    if config.warm_start:
        start = online
    else:
        fresh = init_snapshot(config.arch, config.seed)
        start = fresh.with_params(fresh.params, version=online.version)
        optimizer = None
    trainer = Trainer(start, config, optimizer)
    for sl in _batches(len(ordered), config.batch_size):
        trainer.step(ordered.indices[sl], ordered.labels[sl], teacher[sl], ordered.ids[sl])
    successor = trainer.snapshot()
    if successor.version == online.version:  # empty day still promotes a new version
        successor = successor.with_params(successor.params)
    day = int(ordered.days(config.time_unit)[0]) if len(ordered) else -1
    report = CycleReport(day, online.version, successor.version, metrics, trainer.batch_losses)
    return successor, report


@dataclass
class OnePassRun:
    warmup_snapshot: ModelSnapshot
    final_snapshot: ModelSnapshot
    reports: list[CycleReport]


def _as_examples(stream) -> ExampleSet:
    return stream.examples if isinstance(stream, DriftStream) else stream


def run_one_pass_experiment(stream, warmup_days: int, cycle_days: int, config: TrainConfig) -> OnePassRun:
    """Warm up on the first ``warmup_days`` days, then run ``cycle_days`` serve/train cycles."""
    examples = _as_examples(stream)
    days = examples.days(config.time_unit)
    distinct = np.unique(days)
    if warmup_days < 1:
        raise ValueError("warmup needs at least one day")
    if len(distinct) < warmup_days + cycle_days:
        raise DataError(
            f"stream has {len(distinct)} days; warmup {warmup_days} + cycles {cycle_days} "
            f"needs {warmup_days + cycle_days}"
        )
    warm_rows = np.flatnonzero(days <= distinct[warmup_days - 1])
    empty = ExampleSet.empty(examples.field_count)
    warm_split = DatasetSplit(examples.take(warm_rows), empty, empty)
    warm_cfg = replace(config, regime="one_pass", objective="erm", weights=LossWeights())
    warm_trainer = Trainer(init_snapshot(config.arch, config.seed), warm_cfg)
    ordered = warm_split.train.sorted_by_time()
    for sl in _batches(len(ordered), config.batch_size):
        warm_trainer.step(ordered.indices[sl], ordered.labels[sl])
    online = warm_trainer.snapshot()
    warmup_snapshot = online
    optimizer = warm_trainer.optimizer if config.carry_optimizer_state else None

    reports = []
    for d in distinct[warmup_days : warmup_days + cycle_days]:
        day_examples = examples.take(np.flatnonzero(days == d))
        log, _ = serve_day(online, day_examples)
        cycle_opt = optimizer if config.carry_optimizer_state else None
        online, report = one_pass_cycle(online, day_examples, log, config, cycle_opt)
        reports.append(report)
    return OnePassRun(warmup_snapshot, online, reports)


def run_baseline(data, config: TrainConfig):
    """Same harness as the ranking objectives with a KD, RKD or ERM loss.

    ``data`` is a :class:`DatasetSplit` for the standard regime, or an example
    stream for the one-pass regime (using ``config.warmup_days`` and
    ``config.cycle_days``).
    """
    if config.objective not in ("kd", "rkd", "erm"):
        raise ValueError(f"baseline objective must be kd, rkd or erm, got {config.objective!r}")
    if config.regime == "one_pass":
        return run_one_pass_experiment(data, config.warmup_days, config.cycle_days, config)
    if config.objective == "erm":
        return train_erm(data, config)
    return train_standard_with_teacher(data, config)


def mean_next_day_auc(reports: Sequence[CycleReport]) -> float | None:
    """Mean served-day AUC over cycles whose served model is itself a successor.

    The first cycle is served by the warm-up model, which is identical for every
    objective, so it is skipped whenever later cycles exist.
    """
    scored = list(reports[1:]) if len(reports) > 1 else list(reports)
    aucs = [r.metrics.auc for r in scored if r.metrics.auc is not None]
    return float(np.mean(aucs)) if aucs else None


def write_reports_jsonl(reports: Sequence[CycleReport], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
