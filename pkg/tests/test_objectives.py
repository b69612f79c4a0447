"""Loss identities, hand-computed values, and teacher detachment."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from distillab import diffcore as dc
from distillab import models
from distillab.diffcore import ParameterVector, grad
from distillab.errors import ContractError
from distillab.objectives import (
    KDWeights,
    check_soft_labels,
    cross_entropy,
    kd_kl,
    kd_loss,
    logit_discrepancy,
    softmax,
)

finite_logits = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 6), st.integers(2, 8)),
    elements=st.floats(-30, 30, allow_nan=False),
)


def one_hot(indices, k):
    indices = np.atleast_1d(indices)
    out = np.zeros((len(indices), k))
    out[np.arange(len(indices)), indices] = 1.0
    return out


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), rtol=0, atol=1e-15)

    def test_shift_invariance(self):
        z = np.array([0.4, -1.2])
        shifted = softmax(z + 7.5)
        np.testing.assert_allclose(shifted, softmax(z), rtol=1e-12)

    def test_hand_value(self):
        # softmax((2, 0), tau=2) = softmax((1, 0)) = (e, 1) / (e + 1)
        expected = np.array([np.e / (np.e + 1.0), 1.0 / (np.e + 1.0)])
        np.testing.assert_allclose(softmax(np.array([2.0, 0.0]), tau=2.0), expected, rtol=1e-12)

    def test_temperature_identity(self):
        z = np.array([[3.0, -1.0, 0.5]])
        np.testing.assert_array_equal(softmax(z, tau=2.0), softmax(z / 2.0, tau=1.0))

    def test_tau_contract(self):
        with pytest.raises(ContractError):
            softmax(np.zeros(2), tau=0.0)
        with pytest.raises(ContractError):
            kd_kl(np.zeros(2), np.zeros(2), tau=-1.0)

    @given(finite_logits, st.floats(0.1, 20))
    @settings(max_examples=200, deadline=None)
    def test_rows_are_distributions(self, z, tau):
        probs = softmax(z, tau)
        check_soft_labels(probs)

    @given(finite_logits, st.floats(0.1, 20))
    @settings(max_examples=200, deadline=None)
    def test_temperature_identity_property(self, z, tau):
        np.testing.assert_allclose(softmax(z, tau), softmax(z / tau, 1.0), atol=1e-12)

    def test_soft_label_validation(self):
        with pytest.raises(ContractError):
            check_soft_labels(np.array([0.6, 0.6]))
        with pytest.raises(ContractError):
            check_soft_labels(np.array([1.2, -0.2]))


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        for k in (2, 5, 11):
            value = cross_entropy(np.zeros(k), one_hot([0], k))
            assert value == pytest.approx(np.log(k), abs=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        z = np.array([0.0, 0.0])
        losses = [cross_entropy(z + np.array([m, 0.0]), one_hot([0], 2)) for m in (5, 20, 60)]
        assert losses[0] > losses[1] > losses[2] >= 0.0
        assert losses[2] < 1e-20

    def test_hand_value(self):
        value = cross_entropy(np.array([1.0, 0.0]), one_hot([0], 2))
        assert value == pytest.approx(0.31326168751822286, abs=1e-14)

    def test_batch_is_mean_over_samples(self):
        z = np.array([[1.0, 0.0], [0.0, 2.0]])
        y = one_hot([0, 1], 2)
        singles = [cross_entropy(z[i], y[i : i + 1]) for i in range(2)]
        assert cross_entropy(z, y) == pytest.approx(np.mean(singles), rel=1e-15)

    @given(finite_logits)
    @settings(max_examples=200, deadline=None)
    def test_nonnegative(self, z):
        y = one_hot(np.zeros(z.shape[0], dtype=int), z.shape[1])
        assert cross_entropy(z, y) >= 0.0

    def test_rejects_soft_targets(self):
        with pytest.raises(ContractError):
            cross_entropy(np.zeros(2), np.array([[0.5, 0.5]]))


class TestKdKl:
    def test_zero_at_equal_logits(self):
        z = np.array([[0.3, -2.0, 1.7]])
        assert kd_kl(z, z, tau=3.0) == 0.0

    def test_hand_value(self):
        # direct-sum oracle: p = softmax(1,0), q = softmax(0,1),
        # KL(p || q) = p1*log(p1/q1) + p2*log(p2/q2) = p1 - p2
        value = kd_kl(np.array([0.0, 1.0]), np.array([1.0, 0.0]), tau=1.0)
        assert value == pytest.approx(0.4621171572600098, abs=1e-14)

    def test_tau_squared_factor(self):
        zs = np.array([[0.2, -1.4, 3.0]])
        zt = np.array([[1.0, 0.5, -0.5]])
        assert kd_kl(zs, zt, tau=2.0) == 4.0 * kd_kl(zs / 2.0, zt / 2.0, tau=1.0)

    @given(finite_logits, st.integers(0, 2**31 - 1), st.floats(0.25, 16))
    @settings(max_examples=200, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, zs, seed, tau):
        rng = np.random.default_rng(seed)
        zt = rng.normal(scale=5.0, size=zs.shape)
        assert kd_kl(zs, zt, tau) >= 0.0
        assert kd_kl(zs, zs, tau) <= 1e-9

    def test_saturated_teacher_stays_finite(self):
        zt = np.array([[800.0, 0.0, -800.0]])
        zs = np.array([[0.0, 0.0, 0.0]])
        assert np.isfinite(kd_kl(zs, zt, tau=1.0))

    def test_gradient_reaches_student_only(self):
        zt = np.array([[1.0, -1.0]])
        theta = ParameterVector.from_arrays(
            [("zs", np.array([[0.5, 0.2]])), ("zt", zt.copy())]
        )

        def loss(params):
            return kd_loss(
                params["zs"], one_hot([0], 2), params["zt"], KDWeights(alpha=0.3, tau=2.0)
            )

        g = grad(loss, theta)
        assert np.any(g.segment("zs") != 0.0)
        np.testing.assert_array_equal(g.segment("zt"), np.zeros((1, 2)))


class TestKdLoss:
    def test_alpha_one_is_cross_entropy_bitwise(self):
        zs = np.array([[0.3, 1.1, -0.4]])
        zt = np.array([[5.0, -5.0, 0.0]])
        y = one_hot([2], 3)
        assert kd_loss(zs, y, zt, KDWeights(alpha=1.0, tau=4.0)) == cross_entropy(zs, y)

    def test_alpha_zero_is_kl_bitwise(self):
        zs = np.array([[0.3, 1.1, -0.4]])
        zt = np.array([[5.0, -5.0, 0.0]])
        y = one_hot([2], 3)
        assert kd_loss(zs, y, zt, KDWeights(alpha=0.0, tau=4.0)) == kd_kl(zs, zt, 4.0)

    def test_midpoint_is_mean_of_sublosses(self):
        zs = np.array([[0.3, 1.1, -0.4], [2.0, 0.0, 0.1]])
        zt = np.array([[1.0, -1.0, 0.2], [0.0, 0.3, 0.3]])
        y = one_hot([1, 0], 3)
        w = KDWeights(alpha=0.5, tau=3.0)
        expected = 0.5 * (cross_entropy(zs, y) + kd_kl(zs, zt, 3.0))
        assert kd_loss(zs, y, zt, w) == pytest.approx(expected, rel=1e-15)

    @given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_continuous_affine_in_alpha(self, alpha, seed):
        rng = np.random.default_rng(seed)
        zs = rng.normal(size=(3, 4))
        zt = rng.normal(size=(3, 4))
        y = one_hot(rng.integers(4, size=3), 4)
        w = KDWeights(alpha=alpha, tau=2.0)
        expected = alpha * cross_entropy(zs, y) + (1 - alpha) * kd_kl(zs, zt, 2.0)
        assert kd_loss(zs, y, zt, w) == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ContractError):
            KDWeights(alpha=1.5)
        with pytest.raises(ContractError):
            KDWeights(tau=0.0)


class TestLogitDiscrepancy:
    @staticmethod
    def tiny_model(seed):
        spec = models.ModelSpec(kind="mlp", k=2, input_dim=3, hidden=(4,), init_seed=seed)
        return models.init(spec)

    def test_identical_models_give_zero(self):
        m = self.tiny_model(0)
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert logit_discrepancy(m, m, x) == 0.0

    def test_constant_offset(self):
        m = self.tiny_model(1)
        shifted_params = m.params.copy()
        bias = shifted_params.segment("layer1.bias")
        bias += np.array([2.0, -1.0])
        shifted = m.with_params(shifted_params)
        x = np.random.default_rng(1).normal(size=(7, 3))
        expected = float(np.sum(np.array([2.0, -1.0]) ** 2))
        assert logit_discrepancy(shifted, m, x) == pytest.approx(expected, rel=1e-12)

    def test_per_sample_hand_sum(self):
        a, b = self.tiny_model(2), self.tiny_model(3)
        x = np.random.default_rng(2).normal(size=(5, 3))
        za, zb = a.forward(x), b.forward(x)
        expected = np.mean([np.sum((za[i] - zb[i]) ** 2) for i in range(5)])
        assert logit_discrepancy(a, b, x) == pytest.approx(expected, rel=1e-12)

    def test_empty_dataset_contract(self):
        m = self.tiny_model(4)
        with pytest.raises(ContractError):
            logit_discrepancy(m, m, np.zeros((0, 3)))
