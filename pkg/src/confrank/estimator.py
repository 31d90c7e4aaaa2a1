"""scikit-learn compatible wrappers around the hashing and training core."""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .features import hash_field
from .losses import LossWeights
from .models import ArchDescriptor, init_snapshot, predict_logits
from .pipeline import Trainer, TrainConfig


class FieldHasher(TransformerMixin, BaseEstimator):
    """Hash a 2-D array of raw categorical values into per-field indices.

    Stateless apart from remembering the column count; ``None``, NaN and empty
    strings map to the reserved missing index 0.

    Parameters
    ----------
    hash_dim : int, default=4096
        Size of each field's index space.
    """

    def __init__(self, hash_dim=4096):
        self.hash_dim = hash_dim

    def fit(self, X, y=None):
        X = check_array(X, dtype=None, ensure_all_finite=False)
        if self.hash_dim < 2:
            raise ValueError(f"hash_dim must be >= 2, got {self.hash_dim}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=None, ensure_all_finite=False)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        out = np.empty(X.shape, dtype=np.int64)
        for f in range(X.shape[1]):
            cache = {}
            for i, value in enumerate(X[:, f]):
                text = _raw_text(value)
                if text not in cache:
                    cache[text] = hash_field(f, text, self.hash_dim)
                out[i, f] = cache[text]
        return out


def _raw_text(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return str(value)


class ConfidenceRankingClassifier(ClassifierMixin, BaseEstimator):
    """CTR classifier trained with cross-entropy plus confidence-ranking terms.

    When ``teacher_logits`` are passed to :meth:`fit` or :meth:`partial_fit`
    (the logits a previously deployed model produced on the same rows) the
    configured objective is added to cross-entropy; without them training is
    plain cross-entropy.

    Parameters
    ----------
    model : {"lr", "fm", "deepfm"}, default="deepfm"
    hash_dim : int, default=4096
        Index space per field; inputs must already be hashed into it.
    embedding_dim, hidden_units : int
        FM/DeepFM sizes.
    objective : {"cr", "kd", "rkd", "erm"}, default="cr"
    lambda_cr, lambda_rcr : float, default=(0.4, 0.5)
        Weights of the point-wise and relational ranking terms.
    phi : {"logistic", "square"}, default="logistic"
    kd_alpha, kd_temperature, rkd_weight : float
        Baseline objective settings.
    batch_size : int, default=256
    learning_rate : float, default=0.05
        Adagrad step size.
    max_epochs : int, default=1
        Passes over the data in :meth:`fit`; pass 1 keeps row order, later
        passes are shuffled with ``random_state``.
    random_state : int, default=0
    warm_start : bool, default=False
        Continue from the current parameters when ``fit`` is called again.

    Attributes
    ----------
    snapshot_ : ModelSnapshot
        Parameters after the latest update.
    classes_ : ndarray of shape (2,)
    """

    def __init__(
        self,
        model="deepfm",
        hash_dim=4096,
        embedding_dim=8,
        hidden_units=64,
        objective="cr",
        lambda_cr=0.4,
        lambda_rcr=0.5,
        phi="logistic",
        kd_alpha=0.5,
        kd_temperature=2.0,
        rkd_weight=0.5,
        batch_size=256,
        learning_rate=0.05,
        max_epochs=1,
        random_state=0,
        warm_start=False,
    ):
        self.model = model
        self.hash_dim = hash_dim
        self.embedding_dim = embedding_dim
        self.hidden_units = hidden_units
        self.objective = objective
        self.lambda_cr = lambda_cr
        self.lambda_rcr = lambda_rcr
        self.phi = phi
        self.kd_alpha = kd_alpha
        self.kd_temperature = kd_temperature
        self.rkd_weight = rkd_weight
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.random_state = random_state
        self.warm_start = warm_start

    def _config(self, n_fields: int) -> TrainConfig:
        arch = ArchDescriptor(self.model, n_fields, self.hash_dim, self.embedding_dim, self.hidden_units)
        weights = LossWeights(self.lambda_cr, self.lambda_rcr) if self.objective == "cr" else LossWeights()
        return TrainConfig(
            arch,
            objective=self.objective,
            regime="one_pass",
            weights=weights,
            phi=self.phi,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.max_epochs,
            seed=self.random_state,
            kd_alpha=self.kd_alpha,
            kd_temperature=self.kd_temperature,
            rkd_weight=self.rkd_weight,
        )

    def _validate(self, X, y, teacher_logits):
        X, y = check_X_y(X, y, dtype=np.int64)
        labels = np.unique(y)
        if not np.isin(labels, (0, 1)).all():
            raise ValueError(f"labels must be 0 or 1, got {labels}")
        if teacher_logits is not None:
            teacher_logits = check_array(teacher_logits, ensure_2d=False, dtype=np.float64).ravel()
            if teacher_logits.size != len(y):
                raise ValueError("teacher_logits must have one value per row")
        return X, y.astype(np.int8), teacher_logits

    def _ensure_trainer(self, n_fields: int, reset: bool):
        if reset or not hasattr(self, "_trainer"):
            config = self._config(n_fields)
            self._trainer = Trainer(init_snapshot(config.arch, self.random_state), config)
            self.n_features_in_ = n_fields
            self.classes_ = np.array([0, 1])
        elif n_fields != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} fields, got {n_fields}")

    def _pass(self, X, y, teacher, order):
        for start in range(0, len(order), self.batch_size):
            rows = order[start : start + self.batch_size]
            self._trainer.step(X[rows], y[rows], None if teacher is None else teacher[rows])
        self.snapshot_ = self._trainer.snapshot()

    def fit(self, X, y, teacher_logits=None):
        X, y, teacher = self._validate(X, y, teacher_logits)
        self._ensure_trainer(X.shape[1], reset=not self.warm_start)
        rng = np.random.default_rng(self.random_state)
        for epoch in range(self.max_epochs):
            order = np.arange(len(y)) if epoch == 0 else rng.permutation(len(y))
            self._pass(X, y, teacher, order)
        return self

    def partial_fit(self, X, y, teacher_logits=None):
        """One pass over the rows in the given order (online learning)."""
        X, y, teacher = self._validate(X, y, teacher_logits)
        self._ensure_trainer(X.shape[1], reset=False)
        self._pass(X, y, teacher, np.arange(len(y)))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "snapshot_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} fields, got {X.shape[1]}")
        return predict_logits(self.snapshot_, X)

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)
