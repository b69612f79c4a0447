"""Training and analysis objectives for teacher-student runs.

Every loss accepts either plain arrays (analysis) or a graph ``Var`` for
the student logits (training); teacher logits are always consumed as
plain data, so no gradient can reach the teacher by construction.

Log-probabilities are computed through max-shifted log-sum-exp, which
keeps saturated distributions finite, and per-sample divergences are
clamped at zero so floating-point rounding can never drive them
negative. Batch losses are means over samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Var
from .errors import ContractError

__all__ = [
    "KDWeights",
    "softmax",
    "check_soft_labels",
    "cross_entropy",
    "kd_kl",
    "kd_loss",
    "logit_discrepancy",
]


@dataclass(frozen=True)
class KDWeights:
    """Mixing weight alpha between hard-label and distillation terms,
    and the softmax temperature tau applied to both logit sets."""

    alpha: float = 0.5
    tau: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise ContractError(f"tau must be positive, got {self.tau}")


def _as_rows(z, name):
    if isinstance(z, Var):
        if z.ndim == 1:
            z = z.reshape((1, -1))
        if z.ndim != 2:
            raise ContractError(f"{name} must be 1-D or 2-D")
        return z
    arr = dc.as_array64(z, name)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 1-D or 2-D")
    return arr


def _check_one_hot(y, n=None, k=None):
    y = dc.as_array64(y, "labels")
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2:
        raise ContractError("labels must be a one-hot matrix")
    ok = np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)
    if not ok:
        raise ContractError("labels must be exactly one-hot rows")
    if n is not None and y.shape[0] != n:
        raise ContractError(f"expected {n} label rows, got {y.shape[0]}")
    if k is not None and y.shape[1] != k:
        raise ContractError(f"expected one-hot width {k}, got {y.shape[1]}")
    return y


def _log_softmax(z: Var, tau: float) -> Var:
    # The max shift is held constant: log-softmax is shift invariant, so
    # its derivatives of every order are unchanged by detaching it.
    zt = z * (1.0 / tau)
    shift = dc.constant(np.max(zt.data, axis=1, keepdims=True))
    centered = zt - shift
    lse = dc.log(centered.exp().sum(axis=1, keepdims=True))
    return centered - lse


def softmax(z, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, stabilized by max shift.

    Rows sum to one; softmax(z, tau) equals softmax(z / tau, 1).
    """
    if not tau > 0.0:
        raise ContractError(f"tau must be positive, got {tau}")
    squeeze = not isinstance(z, Var) and np.asarray(z).ndim == 1
    z = _as_rows(z, "logits")
    data = z.data if isinstance(z, Var) else z
    zt = data / tau
    e = np.exp(zt - zt.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if squeeze else probs


def check_soft_labels(probs) -> np.ndarray:
    """Validate a soft-label matrix: entries in [0, 1], rows sum to one."""
    probs = dc.as_array64(probs, "soft labels")
    rows = probs[None, :] if probs.ndim == 1 else probs
    if np.any(rows < 0.0) or np.any(rows > 1.0):
        raise ContractError("soft-label entries must lie in [0, 1]")
    if np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("soft-label rows must sum to 1 within 1e-9")
    return probs


def _ce_terms(z: Var, y: np.ndarray) -> Var:
    logp = _log_softmax(z, 1.0)
    per_sample = -(logp * dc.constant(y)).sum(axis=1)
    return per_sample.relu()  # guards against -eps from rounding


def cross_entropy(z, y):
    """Mean cross-entropy between logits and one-hot labels at tau = 1."""
    tracked = isinstance(z, Var)
    z = _as_rows(z, "student logits")
    n = z.shape[0]
    y = _check_one_hot(y, n=n, k=z.shape[1])
    if tracked:
        return _ce_terms(z, y).mean()
    with dc.no_tape():
        return float(_ce_terms(dc.constant(z), y).mean().data)


def _kl_terms(z_s: Var, z_t: np.ndarray, tau: float) -> Var:
    with dc.no_tape():
        log_pt = _log_softmax(dc.constant(z_t), tau).data
    pt = np.exp(log_pt)
    log_ps = _log_softmax(z_s, tau)
    per_sample = (dc.constant(pt) * (dc.constant(log_pt) - log_ps)).sum(axis=1)
    return per_sample.relu() * (tau * tau)


def kd_kl(z_s, z_t, tau: float):
    """Temperature-scaled KL from teacher to student distributions.

    Returns tau^2 * KL(softmax(z_t / tau) || softmax(z_s / tau)),
    averaged over the batch. Teacher logits are treated as constants:
    gradients flow to the student side only.
    """
    if not tau > 0.0:
        raise ContractError(f"tau must be positive, got {tau}")
    tracked = isinstance(z_s, Var)
    z_s = _as_rows(z_s, "student logits")
    z_t = z_t.data if isinstance(z_t, Var) else dc.as_array64(z_t, "teacher logits")
    if z_t.ndim == 1:
        z_t = z_t[None, :]
    n = z_s.shape[0]
    if z_t.shape != (n, z_s.shape[1]):
        raise ContractError(f"teacher logits shape {z_t.shape} does not match student")
    if tracked:
        return _kl_terms(z_s, z_t, tau).mean()
    with dc.no_tape():
        return float(_kl_terms(dc.constant(z_s), z_t, tau).mean().data)


def kd_loss(z_s, y, z_t, weights: KDWeights):
    """Distillation objective: alpha * CE(z_s, y) + (1 - alpha) * KL term.

    The endpoints reduce exactly: alpha = 1 is plain cross-entropy (the
    teacher never enters the graph) and alpha = 0 is the pure KL term.
    """
    a = weights.alpha
    if a == 1.0:
        return cross_entropy(z_s, y)
    if a == 0.0:
        return kd_kl(z_s, z_t, weights.tau)
    ce = cross_entropy(z_s, y)
    kl = kd_kl(z_s, z_t, weights.tau)
    return ce * a + kl * (1.0 - a) if isinstance(ce, Var) else a * ce + (1.0 - a) * kl


def logit_discrepancy(student, teacher, dataset, batch_size: int = 4096) -> float:
    """Mean squared Euclidean distance between the two models' logits."""
    inputs = dataset.inputs if hasattr(dataset, "inputs") else dc.as_array64(dataset, "inputs")
    n = inputs.shape[0]
    if n == 0:
        raise ContractError("logit_discrepancy needs a nonempty dataset")
    if student.k != teacher.k:
        raise ContractError("student and teacher must share the output arity")
    total = 0.0
    for lo in range(0, n, batch_size):
        xb = inputs[lo : lo + batch_size]
        diff = student.forward(xb) - teacher.forward(xb)
        total += float(np.sum(diff * diff))
    return total / n
