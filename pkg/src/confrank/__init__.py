"""Confidence-ranking training for CTR models."""

__version__ = "0.1.0"

from .estimator import ConfidenceRankingClassifier, FieldHasher
from .features import (
    DatasetSplit,
    DriftStreamConfig,
    Example,
    ExampleSet,
    FieldSchema,
    generate_drift_stream,
    hash_field,
    load_csv,
    temporal_split,
)
from .losses import (
    BatchLogits,
    LossWeights,
    ScoringFunction,
    ce_loss,
    combined_loss,
    cr_loss,
    kd_loss,
    rcr_loss,
    rkd_logit_loss,
)
from .metrics import MetricReport, accuracy, auc, evaluate, ranking_score_acc, ranking_score_auc
from .models import ArchDescriptor, ModelSnapshot, init_snapshot, load_snapshot, save_snapshot
from .pipeline import (
    PredictionLog,
    TrainConfig,
    one_pass_cycle,
    run_one_pass_experiment,
    serve_day,
    train_erm,
    train_standard_with_teacher,
)
