"""Optimizer contracts: schedule endpoints, clipping, momentum, SAM."""

import numpy as np
import pytest

from distillab import diffcore as dc
from distillab.diffcore import ParameterVector, grad
from distillab.errors import ContractError, NumericError
from distillab.optim import (
    OptimConfig,
    OptimState,
    clip_by_global_norm,
    cosine_lr,
    learning_rate,
    sam_perturbation,
    sam_step,
    sgd_step,
)


def theta_of(values):
    return ParameterVector.from_arrays([("theta", np.asarray(values, dtype=np.float64))])


def quad_grad_fn(a_diag):
    a = np.asarray(a_diag, dtype=np.float64)

    def grad_fn(params):
        return params.with_flat(a * params.flat)

    return grad_fn


def quad_loss(a_diag, params):
    return 0.5 * float(np.sum(a_diag * params.flat**2))


class TestCosine:
    CFG = OptimConfig(lr0=0.1, lr_min=0.004, t_max=100)

    def test_endpoints(self):
        assert cosine_lr(0, self.CFG) == pytest.approx(0.1, abs=0)
        assert cosine_lr(100, self.CFG) == 0.004

    def test_midpoint(self):
        cfg = OptimConfig(lr0=0.1, lr_min=0.0, t_max=100)
        assert cosine_lr(50, cfg) == pytest.approx(0.05, abs=1e-15)

    def test_clamps_beyond_horizon(self):
        assert cosine_lr(1000, self.CFG) == 0.004

    def test_monotone_nonincreasing(self):
        values = [cosine_lr(t, self.CFG) for t in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_constant_schedule(self):
        cfg = OptimConfig(lr0=0.3, schedule="constant")
        assert learning_rate(12345, cfg) == 0.3

    def test_requires_t_max(self):
        with pytest.raises(ContractError):
            cosine_lr(0, OptimConfig(lr0=0.1))


class TestSgdStep:
    def test_plain_sgd(self):
        cfg = OptimConfig(lr0=0.1, momentum=0.0, weight_decay=0.0, clip_norm=None)
        params = theta_of([1.0, -2.0])
        g = theta_of([0.5, 0.5])
        new, state = sgd_step(params, g, OptimState.fresh(params), cfg, lr=0.1)
        np.testing.assert_array_equal(new.flat, [1.0 - 0.05, -2.0 - 0.05])
        assert state.step_count == 1

    def test_clip_produces_exact_norm(self):
        cfg = OptimConfig(lr0=1.0, momentum=0.0, weight_decay=0.0, clip_norm=5.0)
        g = np.zeros(4)
        g[0] = 10.0
        clipped = clip_by_global_norm(g, 5.0)
        assert np.linalg.norm(clipped) == pytest.approx(5.0, rel=1e-12)
        params = theta_of(np.zeros(4))
        new, _ = sgd_step(params, params.with_flat(g), OptimState.fresh(params), cfg, lr=1.0)
        assert np.linalg.norm(new.flat) == pytest.approx(5.0, rel=1e-12)

    def test_no_clip_below_threshold(self):
        g = np.array([3.0, 4.0])  # norm 5, at the boundary
        assert np.array_equal(clip_by_global_norm(g, 5.0), g)

    def test_momentum_matches_hand_unrolled_recurrence(self):
        # quadratic 0.5 * a * theta^2, a = 2, lr = 0.1, momentum = 0.9
        a, lr, m = 2.0, 0.1, 0.9
        cfg = OptimConfig(lr0=lr, momentum=m, weight_decay=0.0, clip_norm=None)
        params = theta_of([1.0])
        state = OptimState.fresh(params)
        g1 = a * 1.0
        v1 = g1
        t1 = 1.0 - lr * v1
        g2 = a * t1
        v2 = m * v1 + g2
        t2 = t1 - lr * v2
        step1, state = sgd_step(params, theta_of([g1]), state, cfg, lr)
        assert step1.flat[0] == pytest.approx(t1, rel=1e-15)
        step2, state = sgd_step(step1, theta_of([a * step1.flat[0]]), state, cfg, lr)
        assert step2.flat[0] == pytest.approx(t2, rel=1e-15)
        assert state.step_count == 2

    def test_weight_decay_enters_gradient(self):
        cfg = OptimConfig(lr0=1.0, momentum=0.0, weight_decay=0.1, clip_norm=None)
        params = theta_of([2.0])
        new, _ = sgd_step(params, theta_of([0.0]), OptimState.fresh(params), cfg, lr=1.0)
        assert new.flat[0] == pytest.approx(2.0 - 0.1 * 2.0, rel=1e-15)

    def test_lr_zero_is_identity(self):
        cfg = OptimConfig(lr0=0.1)
        params = theta_of([1.0, 2.0, 3.0])
        new, _ = sgd_step(params, theta_of([4.0, 5.0, 6.0]), OptimState.fresh(params), cfg, 0.0)
        np.testing.assert_array_equal(new.flat, params.flat)

    def test_update_in_span_of_velocity_and_gradient(self):
        cfg = OptimConfig(lr0=0.1, momentum=0.7, weight_decay=0.0, clip_norm=None)
        params = theta_of([0.0, 0.0, 0.0])
        v0 = np.array([1.0, 0.0, 0.0])
        g = np.array([0.0, 1.0, 0.0])
        state = OptimState(velocity=params.with_flat(v0), step_count=5)
        new, _ = sgd_step(params, params.with_flat(g), state, cfg, lr=1.0)
        delta = new.flat - params.flat
        # delta must be a combination of v0 and g only
        basis = np.stack([v0, g])
        residual = delta - basis.T @ np.linalg.lstsq(basis.T, delta, rcond=None)[0]
        assert np.linalg.norm(residual) < 1e-12

    def test_nonfinite_gradient_aborts(self):
        cfg = OptimConfig()
        params = theta_of([1.0])
        with pytest.raises(NumericError, match="theta"):
            sgd_step(params, theta_of([np.nan]), OptimState.fresh(params), cfg, 0.1)


class TestSamStep:
    def test_zero_gradient_matches_sgd_step(self):
        cfg = OptimConfig(lr0=0.1, momentum=0.5, weight_decay=0.0, clip_norm=None, sam_rho=0.05)
        params = theta_of([1.0, 2.0])
        state = OptimState(velocity=theta_of([0.3, -0.1]), step_count=3)
        zero_fn = lambda p: p.zeros_like()
        via_sam, _ = sam_step(params, zero_fn, state, cfg, lr=0.1)
        via_sgd, _ = sgd_step(params, params.zeros_like(), state, cfg, lr=0.1)
        np.testing.assert_array_equal(via_sam.flat, via_sgd.flat)

    def test_perturbation_norm_is_rho(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = theta_of(rng.normal(size=7))
            eps = sam_perturbation(g, rho=0.05)
            assert eps.norm() == pytest.approx(0.05, rel=1e-12)
        assert sam_perturbation(theta_of(np.zeros(3)), rho=0.05).norm() == 0.0

    def test_one_dimensional_quadratic_hand_step(self):
        # L = 0.5 * a * theta^2: ascent lands at theta + rho * sign(theta),
        # so the descent gradient is a * (theta + rho * sign(theta)).
        a, rho, lr, th = 3.0, 0.2, 0.05, 0.7
        cfg = OptimConfig(lr0=lr, momentum=0.0, weight_decay=0.0, clip_norm=None, sam_rho=rho)
        params = theta_of([th])
        new, _ = sam_step(params, quad_grad_fn([a]), OptimState.fresh(params), cfg, lr)
        expected = th - lr * a * (th + rho * np.sign(th))
        assert new.flat[0] == pytest.approx(expected, rel=1e-14)

    def test_requires_rho(self):
        params = theta_of([1.0])
        with pytest.raises(ContractError):
            sam_step(params, quad_grad_fn([1.0]), OptimState.fresh(params), OptimConfig(), 0.1)

    def test_converges_on_convex_quadratic(self):
        # small constant lr: loss decreases monotonically after burn-in
        a = np.linspace(1.0, 3.0, 10)
        cfg = OptimConfig(
            lr0=0.02, momentum=0.0, weight_decay=0.0, clip_norm=None,
            schedule="constant", sam_rho=1e-3,
        )
        params = theta_of(np.random.default_rng(1).normal(size=10))
        state = OptimState.fresh(params)
        grad_fn = quad_grad_fn(a)
        losses = [quad_loss(a, params)]
        for _ in range(200):
            params, state = sam_step(params, grad_fn, state, cfg, cfg.lr0)
            losses.append(quad_loss(a, params))
        burn_in = 5
        tail = losses[burn_in:]
        assert all(x >= y for x, y in zip(tail, tail[1:]))
        assert tail[-1] < 1e-4 * tail[0]


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lr0": 0.0},
            {"momentum": 1.0},
            {"momentum": -0.1},
            {"weight_decay": -1e-9},
            {"clip_norm": 0.0},
            {"schedule": "linear"},
            {"t_max": 0},
            {"lr_min": -0.1},
            {"sam_rho": 0.0},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ContractError):
            OptimConfig(**kwargs)
