"""Evaluation metrics and model-vs-model ranking scores.

All scores passed here are logits; probabilities are ``sigmoid(logit)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .exceptions import UndefinedMetricError
from .losses import softplus

REPORT_SCHEMA_VERSION = 1
_PAIR_BLOCK = 1 << 22


def _as_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length ({scores.size} vs {labels.size})")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count one half.

    Computed from average ranks (Mann-Whitney U) in O(N log N).
    """
    scores, pos = _as_arrays(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (got {n_pos} pos, {n_neg} neg)")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction correct when ``sigmoid(score) >= threshold`` predicts a click."""
    scores, pos = _as_arrays(scores, labels)
    if scores.size == 0:
        raise ValueError("accuracy of an empty input")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    # compare on the logit scale so threshold 0.5 is exactly logit 0
    cut = math.log(threshold) - math.log1p(-threshold)
    return float(np.mean((scores >= cut) == pos))


def margin_diagnostics(scores, labels):
    """Return (pos_mean, neg_mean, sample_margin); absent classes give None."""
    scores, pos = _as_arrays(scores, labels)
    probs = expit(scores)
    pos_mean = float(probs[pos].mean()) if pos.any() else None
    neg_mean = float(probs[~pos].mean()) if (~pos).any() else None
    margin = pos_mean - neg_mean if pos_mean is not None and neg_mean is not None else None
    return pos_mean, neg_mean, margin


def _check_aligned(student, teacher, student_ids, teacher_ids):
    student = np.asarray(student, dtype=np.float64).ravel()
    teacher = np.asarray(teacher, dtype=np.float64).ravel()
    if student.shape != teacher.shape:
        raise ValueError("student and teacher logits differ in length")
    if (student_ids is None) != (teacher_ids is None):
        raise ValueError("pass ids for both models or for neither")
    if student_ids is not None and not np.array_equal(
        np.asarray(student_ids).ravel(), np.asarray(teacher_ids).ravel()
    ):
        raise ValueError("student and teacher logits are not aligned by example id")
    return student, teacher


def ranking_score_acc(student_logits, teacher_logits, labels, student_ids=None, teacher_ids=None) -> float:
    """Fraction of examples whose label-signed student logit strictly beats the teacher's.

    Labels are mapped to {-1, +1} so negatives count too.
    """
    student, teacher = _check_aligned(student_logits, teacher_logits, student_ids, teacher_ids)
    _, pos = _as_arrays(student, labels)
    if student.size == 0:
        raise ValueError("ranking score of an empty input")
    sign = np.where(pos, 1.0, -1.0)
    return float(np.mean(sign * student > sign * teacher))


def ranking_score_auc(student_logits, teacher_logits, labels, student_ids=None, teacher_ids=None) -> float:
    """Fraction of (positive, negative) pairs where the student's gap strictly exceeds the teacher's.

    Evaluates all n_pos * n_neg pairs: quadratic time, processed in row blocks.
    """
    student, teacher = _check_aligned(student_logits, teacher_logits, student_ids, teacher_ids)
    _, pos = _as_arrays(student, labels)
    if not pos.any() or pos.all():
        raise UndefinedMetricError("ranking AUC score needs both classes")
    s_pos, s_neg = student[pos], student[~pos]
    t_pos, t_neg = teacher[pos], teacher[~pos]
    block = max(1, _PAIR_BLOCK // s_neg.size)
    wins = 0
    for start in range(0, s_pos.size, block):
        s_gap = s_pos[start : start + block, None] - s_neg[None, :]
        t_gap = t_pos[start : start + block, None] - t_neg[None, :]
        wins += int(np.count_nonzero(s_gap > t_gap))
    return wins / (s_pos.size * s_neg.size)


@dataclass(frozen=True)
class MetricReport:
    n_pos: int
    n_neg: int
    auc: float | None = None
    accuracy: float | None = None
    pos_mean: float | None = None
    neg_mean: float | None = None
    sample_margin: float | None = None
    logloss: float | None = None
    c_acc: float | None = None
    c_auc: float | None = None

    @property
    def auc_defined(self) -> bool:
        return self.auc is not None

    _KEYS = (
        "auc", "accuracy", "logloss", "pos_mean", "neg_mean", "sample_margin",
        "n_pos", "n_neg", "c_acc", "c_auc",
    )

    def to_dict(self) -> dict:
        """Fixed key order; ranking scores are omitted when no teacher was given."""
        out = {"schema_version": REPORT_SCHEMA_VERSION}
        for key in self._KEYS:
            value = getattr(self, key)
            if key in ("c_acc", "c_auc") and value is None:
                continue
            out[key] = value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False, separators=(", ", ": "))

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(**{k: data[k] for k in cls._KEYS if k in data})


def evaluate(logits, labels, teacher_logits=None) -> MetricReport:
    """Full report; AUC/margin fields are None when a class is missing."""
    scores, pos = _as_arrays(logits, labels)
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if scores.size == 0:
        return MetricReport(0, 0)
    pos_mean, neg_mean, margin = margin_diagnostics(scores, pos)
    both = n_pos > 0 and n_neg > 0
    y = pos.astype(np.float64)
    logloss = float(np.mean(y * softplus(-scores) + (1 - y) * softplus(scores)))
    c_acc = c_auc = None
    if teacher_logits is not None:
        c_acc = ranking_score_acc(scores, teacher_logits, pos)
        c_auc = ranking_score_auc(scores, teacher_logits, pos) if both else None
    return MetricReport(
        n_pos=n_pos,
        n_neg=n_neg,
        auc=auc(scores, pos) if both else None,
        accuracy=accuracy(scores, pos),
        pos_mean=pos_mean,
        neg_mean=neg_mean,
        sample_margin=margin,
        logloss=logloss,
        c_acc=c_acc,
        c_auc=c_auc,
    )
