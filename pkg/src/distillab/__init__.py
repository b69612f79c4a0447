"""Desk-scale laboratory for knowledge self-distillation and
loss-landscape geometry.

Train small classifiers from scratch or through multi-round
self-distillation, then measure the flatness of the resulting minima
with matrix-free Hessian estimators: randomized trace estimation, power
iteration for the top eigenvalue, stochastic Lanczos quadrature for the
spectral density, and filter-normalized 2-D loss slices.
"""

__version__ = "0.1.0"

from .diffcore import ParameterVector, Tape, Var, grad, hvp, value_and_grad
from .errors import ContractError, ManifestError, NumericError, ParseError
from .models import Model, ModelSpec, forward, init, load_checkpoint, param_count, save_checkpoint
from .objectives import KDWeights, cross_entropy, kd_kl, kd_loss, logit_discrepancy, softmax
from .optim import OptimConfig, OptimState, cosine_lr, sam_step, sgd_step
from .data import (
    LabeledDataset,
    MultiViewSpec,
    cutout,
    load_csv,
    load_idx,
    multiview_generate,
    save_csv,
    save_idx,
)
from .distill import (
    DistillConfig,
    Ensemble,
    RoundRecord,
    TrainingDiverged,
    ban_predict,
    distill_from_ensemble,
    ensemble_logits,
    self_distill,
    train_round,
)
from .curvature import (
    CurvatureContext,
    CurvatureReport,
    SliceGrid,
    dense_hessian,
    hutchinson_trace,
    loss_slice_2d,
    measure_checkpoint,
    slq_spectrum,
    top_eigenvalue,
)
from .estimators import NetClassifier, SelfDistillClassifier

__all__ = [
    "__version__",
    "ParameterVector", "Tape", "Var", "grad", "hvp", "value_and_grad",
    "ContractError", "ManifestError", "NumericError", "ParseError",
    "Model", "ModelSpec", "forward", "init", "param_count",
    "save_checkpoint", "load_checkpoint",
    "KDWeights", "softmax", "cross_entropy", "kd_kl", "kd_loss", "logit_discrepancy",
    "OptimConfig", "OptimState", "cosine_lr", "sgd_step", "sam_step",
    "LabeledDataset", "MultiViewSpec", "multiview_generate", "cutout",
    "load_csv", "save_csv", "load_idx", "save_idx",
    "DistillConfig", "RoundRecord", "TrainingDiverged", "Ensemble",
    "train_round", "self_distill", "ensemble_logits", "distill_from_ensemble", "ban_predict",
    "CurvatureContext", "CurvatureReport", "SliceGrid",
    "hutchinson_trace", "top_eigenvalue", "slq_spectrum", "loss_slice_2d",
    "dense_hessian", "measure_checkpoint",
    "NetClassifier", "SelfDistillClassifier",
]
