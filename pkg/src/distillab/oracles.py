"""Independent verification suites for the differentiation engine and
the curvature estimators.

Gradients are checked against central finite differences of an
independent numpy-only forward pass, Hessian-vector products against
finite differences of gradients, and the matrix-free estimators against
an explicit Hessian assembled column-by-column on models small enough
to afford it. These run both under pytest and through the ``oracle``
CLI verb.

Finite differences are only a valid derivative oracle where the loss is
differentiable, so draws whose FD stencil would cross a ReLU kink (a
pre-activation changing sign inside the stencil) are rejected and
redrawn deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .curvature import dense_hessian, hutchinson_trace, slq_spectrum, top_eigenvalue
from .diffcore import ParameterVector, grad, hvp
from .models import ModelSpec, _im2col_indices, forward_vars, init, param_count
from .objectives import cross_entropy

__all__ = [
    "OracleResult",
    "oracle_families",
    "check_grad_fd",
    "check_hvp_fd",
    "check_dense_hessian",
    "ORACLE_CHECKS",
    "run_oracle",
]


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: {self.detail}"


def oracle_families() -> dict[str, ModelSpec]:
    """One sub-200-parameter configuration per architecture family."""
    families = {
        "mlp": ModelSpec(kind="mlp", k=3, input_dim=4, hidden=(6,)),
        "small-cnn": ModelSpec(kind="small-cnn", k=2, in_shape=(1, 5, 5), channels=(2,)),
        "plain-resnet": ModelSpec(
            kind="plain-resnet", k=2, in_shape=(1, 5, 5), width=2, blocks=1
        ),
    }
    for spec in families.values():
        assert param_count(spec) <= 200
    return families


def _batch(spec: ModelSpec, seed: int):
    rng = np.random.default_rng(seed)
    shape = (8, spec.input_dim) if spec.kind == "mlp" else (8, *spec.in_shape)
    x = rng.normal(size=shape)
    labels = np.zeros((8, spec.k))
    labels[np.arange(8), rng.integers(spec.k, size=8)] = 1.0
    return x, labels


def _engine_loss(spec: ModelSpec, x, labels):
    def loss_fn(pvars):
        return cross_entropy(forward_vars(spec, pvars, x), labels)

    return loss_fn


# --------------------------------------------------------------------------
# numpy-only reference forward (independent of the engine)

def _np_conv(x, weight, bias, pad=1):
    n, c, h, w = x.shape
    f, _, kh, _ = weight.shape
    idx, oh, ow = _im2col_indices(c, h, w, kh, pad)
    xp = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    cols = xp.reshape(n, -1)[:, idx].reshape(n, c * kh * kh, oh * ow)
    out = np.einsum("fq,nqo->nfo", weight.reshape(f, -1), cols) + bias[None, :, None]
    return out.reshape(n, f, oh, ow)


def _np_forward(spec: ModelSpec, segs: dict, x):
    """Logits plus every pre-ReLU activation, flattened, for screening."""
    preacts = []
    if spec.kind == "mlp":
        h = x
        n_layers = len(spec.hidden) + 1
        for i in range(n_layers):
            h = h @ segs[f"layer{i}.weight"].T + segs[f"layer{i}.bias"]
            if i < n_layers - 1:
                preacts.append(h.ravel())
                h = np.maximum(h, 0.0)
        logits = h
    elif spec.kind == "small-cnn":
        h = x
        for i in range(len(spec.channels)):
            h = _np_conv(h, segs[f"conv{i}.weight"], segs[f"conv{i}.bias"])
            preacts.append(h.ravel())
            h = np.maximum(h, 0.0)
        pooled = h.reshape(h.shape[0], h.shape[1], -1).mean(axis=2)
        logits = pooled @ segs["head.weight"].T + segs["head.bias"]
    else:
        h = _np_conv(x, segs["stem.weight"], segs["stem.bias"])
        preacts.append(h.ravel())
        h = np.maximum(h, 0.0)
        for b in range(spec.blocks):
            inner = _np_conv(h, segs[f"block{b}.conv1.weight"], segs[f"block{b}.conv1.bias"])
            preacts.append(inner.ravel())
            inner = np.maximum(inner, 0.0)
            inner = _np_conv(inner, segs[f"block{b}.conv2.weight"], segs[f"block{b}.conv2.bias"])
            pre = h + inner if spec.skip_connections else inner
            preacts.append(pre.ravel())
            h = np.maximum(pre, 0.0)
        pooled = h.reshape(h.shape[0], h.shape[1], -1).mean(axis=2)
        logits = pooled @ segs["head.weight"].T + segs["head.bias"]
    return logits, np.concatenate(preacts)


def _np_loss(spec: ModelSpec, theta: ParameterVector, x, labels) -> float:
    logits, _ = _np_forward(spec, theta.to_dict(), x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - (shifted * labels).sum(axis=1)))


def _preacts(spec: ModelSpec, theta: ParameterVector, x) -> np.ndarray:
    return _np_forward(spec, theta.to_dict(), x)[1]


def _fd_grad_np(spec, theta: ParameterVector, x, labels, eps: float) -> np.ndarray:
    out = np.zeros(theta.total_dim)
    flat = theta.flat
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        lu = _np_loss(spec, theta.with_flat(up), x, labels)
        ld = _np_loss(spec, theta.with_flat(down), x, labels)
        out[i] = (lu - ld) / (2 * eps)
    return out


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def check_grad_fd(trials: int = 20, eps: float = 1e-5, tol: float = 1e-4) -> OracleResult:
    """Engine gradients vs central finite differences of the numpy loss."""
    worst = 0.0
    for fam, spec in oracle_families().items():
        x, labels = _batch(spec, seed=100)
        loss_fn = _engine_loss(spec, x, labels)
        accepted, seed = 0, 0
        while accepted < trials:
            theta = init(spec, seed=seed).params
            seed += 1
            # reject draws whose per-coordinate stencil sits near a kink
            if np.abs(_preacts(spec, theta, x)).min() <= 1e-4:
                continue
            accepted += 1
            err = _rel_err(grad(loss_fn, theta).flat, _fd_grad_np(spec, theta, x, labels, eps))
            worst = max(worst, err)
    return OracleResult(
        "grad-fd", worst < tol, f"max relative error {worst:.3e} (tolerance {tol:.0e})"
    )


def check_hvp_fd(trials: int = 20, eps: float = 1e-4, tol: float = 1e-4) -> OracleResult:
    """hvp vs (grad(theta + eps v) - grad(theta - eps v)) / (2 eps)."""
    worst = 0.0
    for fam, spec in oracle_families().items():
        x, labels = _batch(spec, seed=200)
        loss_fn = _engine_loss(spec, x, labels)
        accepted, seed = 0, 0
        while accepted < trials:
            theta = init(spec, seed=seed).params
            rng = np.random.default_rng(10_000 + seed)
            v = theta.with_flat(rng.normal(size=theta.total_dim))
            seed += 1
            up_theta = theta.with_flat(theta.flat + eps * v.flat)
            down_theta = theta.with_flat(theta.flat - eps * v.flat)
            pre_up = _preacts(spec, up_theta, x)
            pre_down = _preacts(spec, down_theta, x)
            # reject stencils that straddle or touch a ReLU kink
            if np.any(np.sign(pre_up) != np.sign(pre_down)):
                continue
            if min(np.abs(pre_up).min(), np.abs(pre_down).min()) <= 1e-7:
                continue
            accepted += 1
            fd = (grad(loss_fn, up_theta).flat - grad(loss_fn, down_theta).flat) / (2 * eps)
            err = _rel_err(hvp(loss_fn, theta, v).flat, fd)
            worst = max(worst, err)
    return OracleResult(
        "hvp-fd", worst < tol, f"max relative error {worst:.3e} (tolerance {tol:.0e})"
    )


def check_dense_hessian(
    trace_probes: int = 256,
    lambda_tol: float = 1e-3,
    node_tol: float = 1e-8,
) -> OracleResult:
    """Estimators vs the explicit Hessian on sub-200-parameter models."""
    problems = []
    for fam, spec in oracle_families().items():
        x, labels = _batch(spec, seed=300)
        loss_fn = _engine_loss(spec, x, labels)
        theta = init(spec, seed=7).params
        dense = dense_hessian(loss_fn, theta)
        asym = float(np.abs(dense - dense.T).max())
        if asym >= 1e-8:
            problems.append(f"{fam}: asymmetry {asym:.2e}")
        evals = np.linalg.eigvalsh(dense)
        exact_trace = float(np.trace(dense))
        estimate, stderr = hutchinson_trace(loss_fn, theta, probes=trace_probes, seed=11)
        if abs(estimate - exact_trace) > 3 * max(stderr, 1e-12):
            problems.append(
                f"{fam}: trace {estimate:.4f} vs exact {exact_trace:.4f} "
                f"outside 3 stderr ({stderr:.2e})"
            )
        dominant = float(evals[np.argmax(np.abs(evals))])
        lam, _ = top_eigenvalue(loss_fn, theta, max_iters=5000, tol=1e-10, seed=11)
        if abs(lam - dominant) > lambda_tol * max(abs(dominant), 1e-30):
            problems.append(f"{fam}: lambda_max {lam:.6f} vs exact {dominant:.6f}")
        dim = theta.total_dim
        spectrum = slq_spectrum(loss_fn, theta, lanczos_steps=dim, probes=1, seed=11)
        scale = max(1.0, float(np.abs(evals).max()))
        node_err = max(float(np.min(np.abs(evals - node))) for node, _ in spectrum)
        if node_err > node_tol * scale:
            problems.append(f"{fam}: SLQ node error {node_err:.2e}")
    if problems:
        return OracleResult("dense-hessian", False, "; ".join(problems))
    return OracleResult(
        "dense-hessian", True,
        "trace within 3 stderr, lambda_max within 1e-3, SLQ nodes within 1e-8",
    )


ORACLE_CHECKS = {
    "grad-fd": check_grad_fd,
    "hvp-fd": check_hvp_fd,
    "dense-hessian": check_dense_hessian,
}


def run_oracle(name: str) -> list[OracleResult]:
    if name == "all":
        return [check() for check in ORACLE_CHECKS.values()]
    if name not in ORACLE_CHECKS:
        raise KeyError(
            f"unknown oracle check {name!r}; choose from {sorted(ORACLE_CHECKS)} or 'all'"
        )
    return [ORACLE_CHECKS[name]()]
