"""Matrix-free flatness measurement at checkpoints.

All estimators consume Hessian-vector products only, never an explicit
Hessian: randomized trace estimation over sign probes, power iteration
for the dominant eigenvalue, stochastic Lanczos quadrature for the
eigen-spectral density, and filter-normalized 2-D loss slices.

Probes are independent with per-probe derived seeds, so the aggregate
does not depend on evaluation order. The Hessian's loss context is the
plain cross-entropy on a fixed training subsample; the distillation
term is deliberately excluded so teacher and student reports are
comparable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import LabeledDataset
from .diffcore import LossFn, ParameterVector, hvp
from .errors import ContractError
from .models import Model, ModelSpec, forward_vars
from .objectives import cross_entropy

__all__ = [
    "CurvatureContext",
    "CurvatureReport",
    "SliceGrid",
    "hutchinson_trace",
    "top_eigenvalue",
    "slq_spectrum",
    "loss_slice_2d",
    "dense_hessian",
    "measure_checkpoint",
]


def _probe_rng(seed: int, probe: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(probe)]))


@dataclass(frozen=True)
class CurvatureContext:
    """Loss landscape under inspection: cross-entropy of one architecture
    on a fixed data subsample."""

    spec: ModelSpec
    inputs: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_dataset(cls, spec: ModelSpec, dataset: LabeledDataset, n: int | None = None,
                     seed: int = 0) -> "CurvatureContext":
        if n is None or n >= len(dataset):
            sub = dataset
        else:
            idx = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE])).permutation(
                len(dataset)
            )[:n]
            sub = dataset.subset(np.sort(idx))
        return cls(spec=spec, inputs=sub.inputs, labels=sub.labels)

    def loss_fn(self, pvars) -> dc.Var:
        return cross_entropy(forward_vars(self.spec, pvars, self.inputs), self.labels)

    def loss_at(self, theta: ParameterVector) -> float:
        with dc.no_tape():
            leaves = {n: dc.constant(theta.segment(n)) for n in theta.names}
            return float(self.loss_fn(leaves).data)

    def describe(self) -> dict:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.inputs).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        return {
            "loss": "cross-entropy",
            "n_samples": int(self.inputs.shape[0]),
            "data_sha256": digest.hexdigest()[:16],
        }


@dataclass
class CurvatureReport:
    """Flatness summary for one checkpoint."""

    trace_estimate: float
    trace_stderr: float
    lambda_max: float
    lambda_max_converged: bool
    spectrum: list[tuple[float, float]]
    probes_used: int
    lanczos_steps: int
    loss_context: dict

    def __post_init__(self):
        if self.probes_used < 1:
            raise ContractError("probes_used must be at least 1")
        if self.spectrum:
            weights = np.array([w for _, w in self.spectrum])
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
                raise ContractError("spectrum weights must be nonnegative and sum to 1")

    def to_json(self) -> str:
        payload = {
            "trace_estimate": self.trace_estimate,
            "trace_stderr": self.trace_stderr,
            "lambda_max": self.lambda_max,
            "lambda_max_converged": self.lambda_max_converged,
            "spectrum": [[node, weight] for node, weight in self.spectrum],
            "probes_used": self.probes_used,
            "lanczos_steps": self.lanczos_steps,
            "loss_context": self.loss_context,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CurvatureReport":
        obj = json.loads(text)
        obj["spectrum"] = [(float(n), float(w)) for n, w in obj["spectrum"]]
        return cls(**obj)

    def write_spectrum_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "weight"])
            for node, weight in self.spectrum:
                writer.writerow([repr(node), repr(weight)])


def hutchinson_trace(
    loss_fn: LossFn, theta: ParameterVector, probes: int = 100, seed: int = 0
) -> tuple[float, float]:
    """Randomized trace estimate over sign probes.

    Returns (mean of v^T H v, standard error). The estimator is unbiased
    for tr(H); with a single probe the standard error is reported as
    infinity.
    """
    if probes < 1:
        raise ContractError("hutchinson_trace needs at least one probe")
    samples = np.empty(probes)
    for i in range(probes):
        v = _probe_rng(seed, i).integers(0, 2, size=theta.total_dim) * 2.0 - 1.0
        direction = theta.with_flat(v)
        samples[i] = direction.dot(hvp(loss_fn, theta, direction))
    estimate = float(samples.mean())
    stderr = float(samples.std(ddof=1) / math.sqrt(probes)) if probes > 1 else math.inf
    return estimate, stderr


def top_eigenvalue(
    loss_fn: LossFn,
    theta: ParameterVector,
    max_iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> tuple[float, bool]:
    """Dominant (largest-magnitude) Hessian eigenvalue by power iteration.

    Returns (Rayleigh quotient, converged). Convergence means two
    successive estimates agree to ``tol`` relatively; otherwise the best
    iterate is returned with the flag down. A zero product on the start
    vector triggers a reseeded restart, at most three times.
    """
    if max_iters < 1:
        raise ContractError("max_iters must be at least 1")
    if not tol > 0:
        raise ContractError("tol must be positive")
    for restart in range(4):
        v = _probe_rng(seed, 1000 + restart).normal(size=theta.total_dim)
        v /= np.linalg.norm(v)
        direction = theta.with_flat(v)
        w = hvp(loss_fn, theta, direction)
        if w.norm() > 0.0:
            break
    else:
        return 0.0, True  # operator annihilated every start vector
    estimate = direction.dot(w)
    for _ in range(max_iters):
        norm = w.norm()
        if norm == 0.0:
            return estimate, estimate == 0.0
        direction = w * (1.0 / norm)
        w = hvp(loss_fn, theta, direction)
        new_estimate = direction.dot(w)
        if abs(new_estimate - estimate) < tol * max(abs(new_estimate), 1e-300):
            return new_estimate, True
        estimate = new_estimate
    return estimate, False


def _lanczos(loss_fn, theta, v0: np.ndarray, steps: int):
    """Lanczos tridiagonalization with full reorthogonalization.

    Returns (alphas, betas); truncates early on breakdown (beta ~ 0).
    """
    q = v0 / np.linalg.norm(v0)
    basis = [q]
    alphas, betas = [], []
    scale = 1.0
    for _ in range(steps):
        w = hvp(loss_fn, theta, theta.with_flat(basis[-1])).flat
        alpha = float(basis[-1] @ w)
        alphas.append(alpha)
        scale = max(scale, abs(alpha))
        w = w - alpha * basis[-1]
        if len(basis) > 1:
            w = w - betas[-1] * basis[-2]
        # full reorthogonalization, twice for numerical safety
        stacked = np.stack(basis)
        w = w - stacked.T @ (stacked @ w)
        w = w - stacked.T @ (stacked @ w)
        beta = float(np.linalg.norm(w))
        if beta <= 1e-10 * scale:
            break
        betas.append(beta)
        scale = max(scale, beta)
        basis.append(w / beta)
    else:
        betas = betas[: len(alphas) - 1]
    return np.array(alphas), np.array(betas[: len(alphas) - 1])


def slq_spectrum(
    loss_fn: LossFn,
    theta: ParameterVector,
    lanczos_steps: int = 64,
    probes: int = 10,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """Eigen-spectral density by stochastic Lanczos quadrature.

    Each probe contributes Ritz (node, weight) pairs from the
    eigendecomposition of its tridiagonal matrix; weights are averaged
    across probes and normalized to sum to one. Nodes are sorted.
    """
    if lanczos_steps < 2:
        raise ContractError("lanczos_steps must be at least 2")
    if probes < 1:
        raise ContractError("slq_spectrum needs at least one probe")
    pairs: list[tuple[float, float]] = []
    for p in range(probes):
        v0 = _probe_rng(seed, 2000 + p).normal(size=theta.total_dim)
        alphas, betas = _lanczos(loss_fn, theta, v0, lanczos_steps)
        if alphas.size == 1:
            nodes, weights = alphas, np.ones(1)
        else:
            tri = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
            evals, evecs = np.linalg.eigh(tri)
            nodes, weights = evals, evecs[0, :] ** 2
        pairs.extend((float(n), float(w) / probes) for n, w in zip(nodes, weights))
    total = sum(w for _, w in pairs)
    pairs = [(n, w / total) for n, w in pairs]
    pairs.sort(key=lambda nw: nw[0])
    return pairs


def dense_hessian(loss_fn: LossFn, theta: ParameterVector, limit: int = 2000) -> np.ndarray:
    """Exact Hessian built column-by-column via products with basis
    vectors; the oracle the estimators are validated against."""
    dim = theta.total_dim
    if dim > limit:
        raise ContractError(f"dense_hessian is capped at {limit} parameters, got {dim}")
    columns = np.empty((dim, dim))
    basis = np.zeros(dim)
    for i in range(dim):
        basis[i] = 1.0
        columns[:, i] = hvp(loss_fn, theta, theta.with_flat(basis)).flat
        basis[i] = 0.0
    return columns


# --------------------------------------------------------------------------
# 2-D loss slices

@dataclass
class SliceGrid:
    """Loss values over theta + a*d1 + b*d2 on a symmetric grid."""

    coords: np.ndarray
    losses: np.ndarray
    d1: ParameterVector
    d2: ParameterVector
    origin_loss: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b", "loss"])
            for i, a in enumerate(self.coords):
                for j, b in enumerate(self.coords):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])


def _filter_rows(segment: np.ndarray) -> np.ndarray:
    """View a segment as (filters, fan-in); 1-D segments are one filter."""
    if segment.ndim <= 1:
        return segment.reshape(1, -1)
    return segment.reshape(segment.shape[0], -1)


def filter_normalized_direction(theta: ParameterVector, rng) -> ParameterVector:
    """Gaussian direction rescaled so each filter (or neuron row) matches
    the norm of the corresponding filter of theta; zero-norm filters in
    theta yield zero direction filters."""
    direction = theta.with_flat(rng.normal(size=theta.total_dim))
    for name in theta.names:
        d_rows = _filter_rows(direction.segment(name))
        t_rows = _filter_rows(theta.segment(name))
        d_norms = np.linalg.norm(d_rows, axis=1)
        t_norms = np.linalg.norm(t_rows, axis=1)
        for r in range(d_rows.shape[0]):
            if t_norms[r] == 0.0 or d_norms[r] == 0.0:
                d_rows[r] = 0.0
            else:
                d_rows[r] *= t_norms[r] / d_norms[r]
    return direction


def loss_slice_2d(
    ctx: CurvatureContext,
    theta: ParameterVector,
    resolution: int = 21,
    extent: float = 1.0,
    seed: int = 0,
) -> SliceGrid:
    """Loss surface over two filter-normalized random directions.

    ``resolution`` must be odd so the grid contains the origin, whose
    value equals the checkpoint loss exactly.
    """
    if resolution < 3:
        raise ContractError("resolution must be at least 3")
    if resolution % 2 == 0:
        raise ContractError("resolution must be odd so the grid contains the origin")
    if not extent > 0:
        raise ContractError("extent must be positive")
    d1 = filter_normalized_direction(theta, _probe_rng(seed, 3001))
    d2 = filter_normalized_direction(theta, _probe_rng(seed, 3002))
    coords = np.linspace(-extent, extent, resolution)
    coords[resolution // 2] = 0.0  # exact origin despite linspace rounding
    losses = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            point = theta.with_flat(theta.flat + a * d1.flat + b * d2.flat)
            losses[i, j] = ctx.loss_at(point)
    origin = resolution // 2
    return SliceGrid(
        coords=coords, losses=losses, d1=d1, d2=d2, origin_loss=float(losses[origin, origin])
    )


def measure_checkpoint(
    ctx: CurvatureContext,
    model: Model,
    trace_probes: int = 100,
    lanczos_steps: int = 64,
    slq_probes: int = 10,
    power_iters: int = 100,
    power_tol: float = 1e-4,
    seed: int = 0,
) -> CurvatureReport:
    """Full flatness report for one checkpoint under the given context."""
    theta = model.params
    loss_fn = ctx.loss_fn
    trace, stderr = hutchinson_trace(loss_fn, theta, probes=trace_probes, seed=seed)
    lam, converged = top_eigenvalue(
        loss_fn, theta, max_iters=power_iters, tol=power_tol, seed=seed
    )
    steps = min(lanczos_steps, theta.total_dim)
    spectrum = slq_spectrum(loss_fn, theta, lanczos_steps=steps, probes=slq_probes, seed=seed)
    return CurvatureReport(
        trace_estimate=trace,
        trace_stderr=stderr,
        lambda_max=lam,
        lambda_max_converged=converged,
        spectrum=spectrum,
        probes_used=trace_probes,
        lanczos_steps=steps,
        loss_context=ctx.describe(),
    )
