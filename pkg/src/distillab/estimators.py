"""scikit-learn estimator wrappers around the training machinery.

These adapters make the trainers compose with the wider ecosystem
(pipelines, cross-validation, grid search): plain ``fit(X, y)`` over
2-D feature arrays, ``predict``/``predict_proba``, and the standard
``get_params``/``set_params`` contract inherited from BaseEstimator.
Image architectures are reachable through the experiment CLI instead.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import LabeledDataset
from .distill import DistillConfig, ban_predict, self_distill, train_round
from .models import ModelSpec
from .objectives import KDWeights, softmax
from .optim import OptimConfig

__all__ = ["NetClassifier", "SelfDistillClassifier"]


def _as_int_seed(random_state) -> int:
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise TypeError("random_state must be an int seed or None")


class _BaseNetClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit plumbing: validation, label encoding, config wiring."""

    def _distill_config(self) -> DistillConfig:
        return DistillConfig(
            weights=KDWeights(alpha=self.alpha, tau=self.tau),
            rounds=getattr(self, "rounds", 1),
            epochs=self.epochs,
            optim=OptimConfig(
                lr0=self.lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                clip_norm=self.clip_norm,
                schedule=self.schedule,
                sam_rho=self.sam_rho,
            ),
            seed=_as_int_seed(self.random_state),
            batch_size=self.batch_size,
            checkpoint=self.checkpoint,
            heldout_fraction=self.heldout_fraction,
        )

    def _encode(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        labels = np.zeros((len(encoded), len(self.classes_)))
        labels[np.arange(len(encoded)), encoded] = 1.0
        return X, LabeledDataset(X, labels)

    def _spec(self) -> ModelSpec:
        return ModelSpec(
            kind="mlp",
            k=len(self.classes_),
            input_dim=self.n_features_in_,
            hidden=tuple(self.hidden),
        )

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.forward(X)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))


class NetClassifier(_BaseNetClassifier):
    """Scratch-trained MLP classifier.

    Parameters
    ----------
    hidden : tuple of int, layer widths of the trunk.
    epochs, batch_size, lr, momentum, weight_decay, clip_norm, schedule :
        the SGD recipe; cosine annealing spans the whole fit.
    sam_rho : float or None, enables the sharpness-aware two-pass step.
    checkpoint : "best-heldout" keeps the epoch with the best held-out
        accuracy; "last" keeps the final epoch.
    random_state : int seed; runs are bit-reproducible per seed.
    """

    def __init__(
        self,
        hidden=(32,),
        epochs=30,
        batch_size=96,
        lr=0.025,
        momentum=0.9,
        weight_decay=3e-4,
        clip_norm=5.0,
        schedule="cosine",
        sam_rho=None,
        checkpoint="best-heldout",
        heldout_fraction=0.1,
        random_state=None,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.schedule = schedule
        self.sam_rho = sam_rho
        self.checkpoint = checkpoint
        self.heldout_fraction = heldout_fraction
        self.random_state = random_state

    alpha = 1.0  # scratch training: hard labels only
    tau = 1.0

    def fit(self, X, y):
        X, dataset = self._encode(X, y)
        record = train_round(None, self._distill_config(), dataset, spec=self._spec())
        self.record_ = record
        self.model_ = record.model
        return self


class SelfDistillClassifier(_BaseNetClassifier):
    """Multi-round self-distilled MLP classifier.

    Round 0 trains from scratch; each later round trains a fresh student
    of the same architecture against the previous round's soft labels
    (weight ``1 - alpha``, temperature ``tau``) plus the ground truth.
    ``predict`` uses the final round; ``predict_ban`` averages the
    logits of every round's checkpoint.
    """

    def __init__(
        self,
        hidden=(32,),
        alpha=0.5,
        tau=4.0,
        rounds=2,
        epochs=30,
        batch_size=96,
        lr=0.025,
        momentum=0.9,
        weight_decay=3e-4,
        clip_norm=5.0,
        schedule="cosine",
        sam_rho=None,
        checkpoint="best-heldout",
        heldout_fraction=0.1,
        random_state=None,
    ):
        self.hidden = hidden
        self.alpha = alpha
        self.tau = tau
        self.rounds = rounds
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.schedule = schedule
        self.sam_rho = sam_rho
        self.checkpoint = checkpoint
        self.heldout_fraction = heldout_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, dataset = self._encode(X, y)
        self.records_ = self_distill(self._distill_config(), dataset, self._spec())
        self.model_ = self.records_[-1].model
        return self

    def predict_ban(self, X) -> np.ndarray:
        """Class labels from the born-again ensemble over all rounds."""
        check_is_fitted(self, "records_")
        X = check_array(X, dtype=np.float64)
        logits = ban_predict(self.records_, X)
        return self.classes_[np.argmax(logits, axis=1)]
