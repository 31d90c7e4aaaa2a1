"""Training objectives over logits.

Every loss takes a :class:`BatchLogits` and returns ``(value, grad)`` where
``grad[i]`` is d(value)/d(student_logit[i]), already including the batch
normalisation.  Teacher logits are constants: no gradient is ever produced
for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import MissingTeacherError

LOG2 = math.log(2.0)
PHI_KINDS = ("logistic", "square")


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class ScoringFunction:
    """Convex margin loss: logistic ``log(1+exp(-m))`` or square ``(1-m)**2``."""

    kind: str = "logistic"

    def __post_init__(self):
        if self.kind not in PHI_KINDS:
            raise ValueError(f"scoring function must be one of {PHI_KINDS}, got {self.kind!r}")

    def value(self, margin):
        margin = np.asarray(margin, dtype=np.float64)
        if self.kind == "logistic":
            return softplus(-margin)
        return (1.0 - margin) ** 2

    def derivative(self, margin):
        margin = np.asarray(margin, dtype=np.float64)
        if self.kind == "logistic":
            return -expit(-margin)
        return -2.0 * (1.0 - margin)


LOGISTIC = ScoringFunction("logistic")
SQUARE = ScoringFunction("square")


def as_phi(phi) -> ScoringFunction:
    return phi if isinstance(phi, ScoringFunction) else ScoringFunction(str(phi).lower())


@dataclass(frozen=True)
class LossWeights:
    lambda_cr: float = 0.0
    lambda_rcr: float = 0.0

    def __post_init__(self):
        for name in ("lambda_cr", "lambda_rcr"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    @property
    def is_zero(self) -> bool:
        return self.lambda_cr == 0 and self.lambda_rcr == 0


class BatchLogits:
    """Aligned student logits, teacher logits and binary labels for one batch.

    ``teacher`` may be omitted for losses that do not read it; NaN entries mark
    examples with no logged teacher logit.
    """

    def __init__(self, student, labels, teacher=None, ids=None):
        self.student = np.asarray(student, dtype=np.float64).ravel()
        self.labels = np.asarray(labels).ravel().astype(np.float64)
        n = self.student.size
        if self.labels.size != n:
            raise ValueError("student logits and labels differ in length")
        if n and not np.isin(self.labels, (0.0, 1.0)).all():
            raise ValueError("labels must be 0 or 1")
        self.teacher = None if teacher is None else np.asarray(teacher, dtype=np.float64).ravel()
        if self.teacher is not None and self.teacher.size != n:
            raise ValueError("teacher logits and student logits differ in length")
        self.ids = None if ids is None else np.asarray(ids).ravel()

    def __len__(self):
        return self.student.size

    def require_teacher(self) -> np.ndarray:
        if self.teacher is None:
            raise MissingTeacherError("no teacher logits supplied for this batch")
        bad = np.flatnonzero(~np.isfinite(self.teacher))
        if bad.size:
            i = int(bad[0])
            who = f"example id {self.ids[i]}" if self.ids is not None else f"batch position {i}"
            raise MissingTeacherError(f"missing teacher logit for {who}")
        return self.teacher


def ce_loss(batch: BatchLogits):
    n = len(batch)
    if n == 0:
        raise ValueError("cross-entropy of an empty batch")
    u, y = batch.student, batch.labels
    losses = y * softplus(-u) + (1.0 - y) * softplus(u)
    return float(losses.mean()), (expit(u) - y) / n


def cr_loss(batch: BatchLogits, phi=LOGISTIC):
    """Point-wise confidence ranking: the student's label-directed margin over the teacher."""
    phi = as_phi(phi)
    v = batch.require_teacher()
    n = len(batch)
    if n == 0:
        raise ValueError("confidence ranking loss of an empty batch")
    y = batch.labels
    diff = batch.student - v
    value = y * phi.value(diff) + (1.0 - y) * phi.value(-diff)
    grad = y * phi.derivative(diff) - (1.0 - y) * phi.derivative(-diff)
    return float(value.mean()), grad / n


def rcr_loss(batch: BatchLogits, phi=LOGISTIC):
    """Relational confidence ranking over all in-batch (positive, negative) pairs.

    Pair margin is ``(u+ - u-) - (v+ - v-)``; a batch without both classes
    contributes zero.
    """
    phi = as_phi(phi)
    pos = np.flatnonzero(batch.labels == 1)
    neg = np.flatnonzero(batch.labels == 0)
    grad = np.zeros(len(batch))
    if pos.size == 0 or neg.size == 0:
        return 0.0, grad
    v = batch.require_teacher()
    excess = batch.student - v
    margins = excess[pos][:, None] - excess[neg][None, :]
    scale = 1.0 / (pos.size * neg.size)
    d = phi.derivative(margins)
    grad[pos] = d.sum(axis=1) * scale
    grad[neg] = -d.sum(axis=0) * scale
    return float(phi.value(margins).sum() * scale), grad


def kd_loss(batch: BatchLogits, temperature: float = 2.0):
    """T^2-scaled binary cross-entropy toward the teacher's softened probability."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = len(batch)
    if n == 0:
        raise ValueError("distillation loss of an empty batch")
    t = temperature
    su = batch.student / t
    target = expit(batch.require_teacher() / t)
    losses = target * softplus(-su) + (1.0 - target) * softplus(su)
    value = t * t * losses.mean()
    grad = t * (expit(su) - target) / n
    return float(value), grad


def rkd_logit_loss(batch: BatchLogits):
    """Mean over ordered pairs i != j of 0.5 * ((u_i - u_j) - (v_i - v_j))**2."""
    n = len(batch)
    if n < 2:
        return 0.0, np.zeros(n)
    e = batch.student - batch.require_teacher()
    e = e - e.mean()  # shift-invariant; centring keeps the sums well conditioned
    pairs = n * (n - 1)
    value = (n * (e * e).sum() - e.sum() ** 2) / pairs
    grad = 2.0 * (n * e - e.sum()) / pairs
    return float(value), grad


def combined_loss(batch: BatchLogits, weights: LossWeights, phi=LOGISTIC):
    """Cross-entropy plus weighted point-wise and relational ranking terms.

    Zero-weighted terms are skipped, so weights (0, 0) is exactly ``ce_loss``
    and needs no teacher.
    """
    value, grad = ce_loss(batch)
    if weights.lambda_cr:
        v, g = cr_loss(batch, phi)
        value += weights.lambda_cr * v
        grad = grad + weights.lambda_cr * g
    if weights.lambda_rcr:
        v, g = rcr_loss(batch, phi)
        value += weights.lambda_rcr * v
        grad = grad + weights.lambda_rcr * g
    return value, grad


def kd_objective(batch: BatchLogits, alpha: float = 0.5, temperature: float = 2.0):
    """``(1 - alpha) * CE + alpha * KD``; alpha 0 is exactly ``ce_loss``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"KD mixing weight must lie in [0, 1], got {alpha}")
    value, grad = ce_loss(batch)
    if alpha == 0:
        return value, grad
    kv, kg = kd_loss(batch, temperature)
    return (1.0 - alpha) * value + alpha * kv, (1.0 - alpha) * grad + alpha * kg


def rkd_objective(batch: BatchLogits, weight: float = 0.5):
    """CE plus ``weight`` times the logit-distance RKD term."""
    value, grad = ce_loss(batch)
    if weight == 0:
        return value, grad
    rv, rg = rkd_logit_loss(batch)
    return value + weight * rv, grad + weight * rg
