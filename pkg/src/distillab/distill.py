"""Multi-round self-distillation, ensembles, and born-again prediction.

Round 0 trains from scratch on hard labels; every later round trains a
freshly initialized student of the same architecture against the
previous checkpoint's soft labels mixed with the ground truth. Teacher
logits are computed on the same augmented batch the student sees, and
the teacher's parameters are never touched.

Model selection follows the best-heldout policy by default: the
persisted checkpoint is the epoch with the highest held-out accuracy,
where the held-out set is a fixed split carved from the training data
(never the test set).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import models as md
from . import optim as op
from .data import LabeledDataset, augment_batch, split_heldout
from .diffcore import ParameterVector, value_and_grad, grad
from .errors import ContractError, NumericError
from .models import Model, ModelSpec, forward_vars
from .objectives import KDWeights, cross_entropy, kd_loss, logit_discrepancy

__all__ = [
    "DistillConfig",
    "EpochStats",
    "RoundRecord",
    "TrainingDiverged",
    "Ensemble",
    "train_round",
    "self_distill",
    "ensemble_logits",
    "distill_from_ensemble",
    "ban_predict",
    "evaluate",
]

CHECKPOINT_POLICIES = ("best-heldout", "last")

# seed-derivation tags, so each randomness consumer gets its own stream
_TAG_SPLIT = 11
_TAG_INIT = 23
_TAG_SHUFFLE = 37
_TAG_AUGMENT = 41
_TAG_MEMBER = 53


def derived_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


@dataclass(frozen=True)
class DistillConfig:
    """One experiment's training settings. ``rounds`` counts the models in
    the chain including the scratch round 0."""

    weights: KDWeights = field(default_factory=KDWeights)
    rounds: int = 1
    epochs: int = 1
    optim: op.OptimConfig = field(default_factory=op.OptimConfig)
    seed: int = 0
    batch_size: int = 96
    augment: bool = False
    checkpoint: str = "best-heldout"
    heldout_fraction: float = 0.1

    def __post_init__(self):
        if self.rounds < 0:
            raise ContractError("rounds must be nonnegative")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.checkpoint not in CHECKPOINT_POLICIES:
            raise ContractError(f"unknown checkpoint policy {self.checkpoint!r}")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ContractError("heldout_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    heldout_loss: float
    heldout_acc: float


@dataclass
class RoundRecord:
    """One round's checkpoint plus its per-epoch history."""

    round_index: int
    model: Model
    history: list[EpochStats]
    best_epoch: int
    discrepancy: float | None = None  # vs the predecessor; None at round 0

    @property
    def heldout_accuracy(self) -> float:
        return self.history[self.best_epoch].heldout_acc

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "split", "accuracy", "loss"])
            for row in self.history:
                writer.writerow([row.epoch, "train", repr(row.train_acc), repr(row.train_loss)])
                writer.writerow(
                    [row.epoch, "heldout", repr(row.heldout_acc), repr(row.heldout_loss)]
                )


class TrainingDiverged(RuntimeError):
    """Raised when a round hits a non-finite loss; carries what finished."""

    def __init__(self, message, partial_history, completed_records=()):
        super().__init__(message)
        self.partial_history = list(partial_history)
        self.completed_records = list(completed_records)


def evaluate(model: Model, dataset: LabeledDataset) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of a model over a dataset."""
    logits = model.forward(dataset.inputs)
    loss = cross_entropy(logits, dataset.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.class_indices))
    return loss, acc


def _teacher_fn(teacher) -> Callable[[np.ndarray], np.ndarray] | None:
    if teacher is None:
        return None
    if isinstance(teacher, Ensemble):
        return lambda x: ensemble_logits(teacher, x)
    return lambda x: md.forward(teacher, x)


def _train_student(
    spec: ModelSpec,
    teacher_logits: Callable[[np.ndarray], np.ndarray] | None,
    cfg: DistillConfig,
    data: LabeledDataset,
    round_index: int,
) -> RoundRecord:
    # All randomness is derived from cfg.seed alone, never from the round
    # index, so two rounds under the same config differ only through the
    # teacher signal. With alpha = 1 the rounds are therefore bit-identical.
    fit_set, heldout = split_heldout(data, cfg.heldout_fraction, cfg.seed)
    student = md.init(spec, derived_seed(cfg.seed, _TAG_INIT))
    params = student.params
    state = op.OptimState.fresh(params)
    shuffle_rng = derived_rng(cfg.seed, _TAG_SHUFFLE)
    augment_rng = derived_rng(cfg.seed, _TAG_AUGMENT)
    n = len(fit_set)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    ocfg = cfg.optim
    if ocfg.schedule == "cosine" and ocfg.t_max is None:
        ocfg = ocfg.with_t_max(cfg.epochs * batches_per_epoch)
    use_teacher = teacher_logits is not None and cfg.weights.alpha != 1.0

    history: list[EpochStats] = []
    best_epoch, best_acc, best_params = 0, -1.0, params
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = fit_set.inputs[idx]
            if cfg.augment:
                xb = augment_batch(xb, augment_rng)
            yb = fit_set.labels[idx]
            zt = teacher_logits(xb) if use_teacher else None

            def loss_fn(pvars, xb=xb, yb=yb, zt=zt):
                zs = forward_vars(spec, pvars, xb)
                if zt is None:
                    return cross_entropy(zs, yb)
                return kd_loss(zs, yb, zt, cfg.weights)

            lr = op.learning_rate(step, ocfg)
            try:
                if ocfg.sam_rho is not None:
                    params, state = op.sam_step(
                        params, lambda p: grad(loss_fn, p), state, ocfg, lr
                    )
                else:
                    _, gradient = value_and_grad(loss_fn, params)
                    params, state = op.sgd_step(params, gradient, state, ocfg, lr)
            except NumericError as exc:
                raise TrainingDiverged(
                    f"round {round_index} diverged at epoch {epoch}, step {step}: {exc}",
                    history,
                ) from exc
            step += 1
        snapshot = Model(spec=spec, params=params)
        train_loss, train_acc = evaluate(snapshot, fit_set)
        held_loss, held_acc = evaluate(snapshot, heldout)
        history.append(EpochStats(epoch, train_loss, train_acc, held_loss, held_acc))
        if held_acc > best_acc:
            best_epoch, best_acc, best_params = epoch, held_acc, params

    if cfg.checkpoint == "last":
        best_epoch, best_params = cfg.epochs - 1, params
    checkpoint = Model(spec=spec, params=best_params)
    return RoundRecord(
        round_index=round_index, model=checkpoint, history=history, best_epoch=best_epoch
    )


def train_round(
    teacher: Model | None,
    cfg: DistillConfig,
    data: LabeledDataset,
    *,
    spec: ModelSpec | None = None,
    round_index: int | None = None,
) -> RoundRecord:
    """Train one student; round 0 (no teacher) reduces to plain
    cross-entropy training. The student always starts from a fresh
    seed-derived init, never from the teacher's weights."""
    if spec is None:
        if teacher is None:
            raise ContractError("train_round needs a spec when there is no teacher")
        spec = teacher.spec
    if teacher is not None and teacher.k != spec.k:
        raise ContractError("teacher and student must share the output arity")
    if round_index is None:
        round_index = 0 if teacher is None else 1
    teacher_eval = None if teacher is None else teacher.with_mode("eval")
    record = _train_student(spec, _teacher_fn(teacher_eval), cfg, data, round_index)
    if teacher_eval is not None:
        _, heldout = split_heldout(data, cfg.heldout_fraction, cfg.seed)
        record.discrepancy = logit_discrepancy(record.model, teacher_eval, heldout)
    return record


def self_distill(
    cfg: DistillConfig, data: LabeledDataset, spec: ModelSpec
) -> list[RoundRecord]:
    """Round chain: record[0] from scratch, record[n] taught by
    record[n-1]'s checkpoint. Halts on divergence, keeping what finished."""
    if cfg.rounds < 1:
        raise ContractError("self_distill needs at least one round")
    records: list[RoundRecord] = []
    teacher: Model | None = None
    for r in range(cfg.rounds):
        try:
            record = train_round(teacher, cfg, data, spec=spec, round_index=r)
        except TrainingDiverged as exc:
            exc.completed_records = records
            raise
        records.append(record)
        teacher = record.model
    return records


@dataclass(frozen=True)
class Ensemble:
    """Models whose logits are averaged into one prediction."""

    members: tuple[Model, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ContractError("an ensemble needs at least one member")
        if len({m.k for m in members}) != 1:
            raise ContractError("ensemble members must share the output arity")
        object.__setattr__(self, "members", members)

    @property
    def k(self) -> int:
        return self.members[0].k

    @property
    def spec(self) -> ModelSpec:
        return self.members[0].spec


def ensemble_logits(ens: Ensemble, x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of member logits."""
    stacked = np.stack([md.forward(m, x) for m in ens.members])
    return stacked.mean(axis=0)


def distill_from_ensemble(
    teacher: Ensemble,
    cfg: DistillConfig,
    data: LabeledDataset,
    *,
    spec: ModelSpec | None = None,
    round_index: int = 1,
) -> RoundRecord:
    """One student trained against averaged ensemble logits."""
    spec = spec or teacher.spec
    if teacher.k != spec.k:
        raise ContractError("teacher ensemble and student must share the output arity")
    record = _train_student(spec, _teacher_fn(teacher), cfg, data, round_index)
    _, heldout = split_heldout(data, cfg.heldout_fraction, cfg.seed)
    diffs = record.model.forward(heldout.inputs) - ensemble_logits(teacher, heldout.inputs)
    record.discrepancy = float(np.mean(np.sum(diffs * diffs, axis=1)))
    return record


def train_scratch_members(
    spec: ModelSpec, cfg: DistillConfig, data: LabeledDataset, count: int
) -> Ensemble:
    """Independent scratch models with per-member derived seeds."""
    if count < 1:
        raise ContractError("ensemble size must be at least 1")
    members = []
    for i in range(count):
        member_cfg = replace(cfg, seed=derived_seed(cfg.seed, _TAG_MEMBER, i))
        members.append(train_round(None, member_cfg, data, spec=spec).model)
    return Ensemble(tuple(members))


def ban_predict(records: Sequence[RoundRecord], x: np.ndarray) -> np.ndarray:
    """Born-again prediction: mean of the per-round checkpoint logits."""
    records = list(records)
    if not records:
        raise ContractError("ban_predict needs at least one round record")
    return ensemble_logits(Ensemble(tuple(r.model for r in records)), x)
