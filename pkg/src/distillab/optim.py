"""SGD with momentum, weight decay, global gradient clipping, cosine
annealing, and the two-pass sharpness-aware variant.

The update rule, in order: weight decay is added to the raw gradient
(coupled, classic SGD style), the result is clipped by global norm,
folded into the velocity, and applied. The sharpness-aware step first
climbs to theta + rho * g / ||g|| and reuses the same rule with the
gradient taken at the perturbed point; the perturbed parameters are
never persisted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .diffcore import LossFn, ParameterVector, grad
from .errors import ContractError

__all__ = [
    "OptimConfig",
    "OptimState",
    "cosine_lr",
    "learning_rate",
    "clip_by_global_norm",
    "sgd_step",
    "sam_step",
    "sam_perturbation",
]

SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class OptimConfig:
    """Recipe knobs; defaults follow the standard small-image setup
    (lr 0.025, momentum 0.9, weight decay 3e-4, clip 5.0, cosine)."""

    lr0: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    clip_norm: float | None = 5.0
    schedule: str = "cosine"
    t_max: int | None = None
    lr_min: float = 0.0
    sam_rho: float | None = None

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ContractError(f"clip_norm must be positive or None, got {self.clip_norm}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.t_max is not None and self.t_max < 1:
            raise ContractError(f"t_max must be at least 1, got {self.t_max}")
        if self.lr_min < 0:
            raise ContractError(f"lr_min must be nonnegative, got {self.lr_min}")
        if self.sam_rho is not None and not self.sam_rho > 0:
            raise ContractError(f"sam_rho must be positive or None, got {self.sam_rho}")

    def with_t_max(self, t_max: int) -> "OptimConfig":
        return replace(self, t_max=int(t_max))


@dataclass
class OptimState:
    velocity: ParameterVector
    step_count: int = 0

    @classmethod
    def fresh(cls, params: ParameterVector) -> "OptimState":
        return cls(velocity=params.zeros_like(), step_count=0)


def cosine_lr(t: int, cfg: OptimConfig) -> float:
    """Half-cosine decay from lr0 at t=0 to lr_min at t=t_max; t beyond
    the horizon clamps to lr_min."""
    if cfg.t_max is None:
        raise ContractError("cosine schedule requires t_max")
    if t < 0:
        raise ContractError(f"step index must be nonnegative, got {t}")
    if t >= cfg.t_max:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.t_max))


def learning_rate(t: int, cfg: OptimConfig) -> float:
    if cfg.schedule == "constant":
        return cfg.lr0
    return cosine_lr(t, cfg)


def clip_by_global_norm(g: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if norm > clip_norm:
        return g * (clip_norm / norm)
    return g


def _prepare(params: ParameterVector, gradient: ParameterVector, cfg: OptimConfig) -> np.ndarray:
    gradient.check_finite("gradient")
    if not params.same_structure(gradient):
        raise ContractError("gradient does not match parameter structure")
    g = gradient.flat
    if cfg.weight_decay:
        g = g + cfg.weight_decay * params.flat
    if cfg.clip_norm is not None:
        g = clip_by_global_norm(g, cfg.clip_norm)
    return g


def sgd_step(
    params: ParameterVector,
    gradient: ParameterVector,
    state: OptimState,
    cfg: OptimConfig,
    lr: float,
) -> tuple[ParameterVector, OptimState]:
    """One momentum-SGD update; returns fresh parameters and state."""
    g = _prepare(params, gradient, cfg)
    v = cfg.momentum * state.velocity.flat + g if cfg.momentum else g
    new_params = params.with_flat(params.flat - lr * v)
    return new_params, OptimState(velocity=params.with_flat(v), step_count=state.step_count + 1)


def sam_perturbation(gradient: ParameterVector, rho: float) -> ParameterVector:
    """Ascent offset rho * g / ||g||; zero when the gradient vanishes."""
    norm = gradient.norm()
    if norm == 0.0:
        return gradient.zeros_like()
    return gradient * (rho / norm)


def sam_step(
    params: ParameterVector,
    grad_fn: Callable[[ParameterVector], ParameterVector],
    state: OptimState,
    cfg: OptimConfig,
    lr: float,
) -> tuple[ParameterVector, OptimState]:
    """Sharpness-aware update: descend with the gradient taken at the
    ascent point. ``grad_fn`` evaluates the batch gradient at any theta."""
    if cfg.sam_rho is None:
        raise ContractError("sam_step requires cfg.sam_rho")
    g_here = grad_fn(params)
    eps = sam_perturbation(g_here, cfg.sam_rho)
    g_used = g_here if eps.norm() == 0.0 else grad_fn(params + eps)
    return sgd_step(params, g_used, state, cfg, lr)


def make_grad_fn(loss_builder: Callable[[], LossFn]) -> Callable[[ParameterVector], ParameterVector]:
    """Adapt a loss-closure factory into the grad_fn shape sam_step wants."""
    loss_fn = loss_builder()

    def grad_fn(theta: ParameterVector) -> ParameterVector:
        return grad(loss_fn, theta)

    return grad_fn
