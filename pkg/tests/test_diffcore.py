"""Engine tests: exact gradients, Hessian-vector products, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillab import diffcore as dc
from distillab.diffcore import ParameterVector, Tape, Var, grad, hvp, value_and_grad
from distillab.errors import ContractError, NumericError


def quadratic_loss(a_matrix):
    """L(theta) = 0.5 * theta^T A theta over a single 'theta' segment."""
    a_const = np.asarray(a_matrix, dtype=np.float64)

    def loss(params):
        th = params["theta"].reshape((-1, 1))
        return 0.5 * dc.vsum(th * dc.matmul(dc.constant(a_const), th))

    return loss


def make_theta(values):
    return ParameterVector.from_arrays([("theta", np.asarray(values, dtype=np.float64))])


def mlp_loss(x, y):
    """Two-layer tanh-free MLP with mean squared logits against targets."""

    def loss(params):
        h = dc.relu(dc.matmul(dc.constant(x), params["w1"].transpose()) + params["b1"])
        z = dc.matmul(h, params["w2"].transpose()) + params["b2"]
        diff = z - dc.constant(y)
        return (diff * diff).mean()

    return loss


def mlp_theta(seed=0, n_in=2, n_hidden=2, n_out=2):
    rng = np.random.default_rng(seed)
    return ParameterVector.from_arrays(
        [
            ("w1", rng.normal(size=(n_hidden, n_in))),
            ("b1", rng.normal(size=(n_hidden,))),
            ("w2", rng.normal(size=(n_out, n_hidden))),
            ("b2", rng.normal(size=(n_out,))),
        ]
    )


def fd_grad(loss_fn, theta, eps=1e-5):
    """Central finite differences, the independent oracle for grad()."""
    flat = theta.flat.copy()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        with dc.no_tape():
            lu = float(loss_fn({n: dc.constant(theta.with_flat(up).segment(n)) for n in theta.names}).data)
            ld = float(loss_fn({n: dc.constant(theta.with_flat(down).segment(n)) for n in theta.names}).data)
        out[i] = (lu - ld) / (2 * eps)
    return theta.with_flat(out)


def fd_hvp(loss_fn, theta, v, eps=1e-4):
    """Finite differences of gradients, the independent oracle for hvp()."""
    up = grad(loss_fn, theta.with_flat(theta.flat + eps * v.flat))
    down = grad(loss_fn, theta.with_flat(theta.flat - eps * v.flat))
    return theta.with_flat((up.flat - down.flat) / (2 * eps))


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


class TestGrad:
    def test_quadratic_gradient(self):
        loss = quadratic_loss(np.diag([2.0, 6.0]))
        g = grad(loss, make_theta([1.0, 1.0]))
        np.testing.assert_array_equal(g.flat, [2.0, 6.0])

    def test_constant_loss_gives_zero_vector(self):
        g = grad(lambda params: dc.constant(3.5), make_theta([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(g.flat, np.zeros(3))

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 1))
        y = rng.normal(size=(4, 2))
        loss = mlp_loss(x, y)
        theta = mlp_theta(seed=3, n_in=1)
        assert theta.total_dim == 10
        g = grad(loss, theta)
        g_fd = fd_grad(loss, theta)
        assert rel_err(g.flat, g_fd.flat) < 1e-6

    def test_value_and_grad_returns_loss(self):
        loss = quadratic_loss(np.eye(2))
        value, g = value_and_grad(loss, make_theta([3.0, 4.0]))
        assert value == pytest.approx(12.5)
        np.testing.assert_array_equal(g.flat, [3.0, 4.0])

    def test_nonfinite_parameters_name_segment(self):
        theta = ParameterVector.from_arrays([("ok", np.ones(2)), ("bad", np.array([1.0, np.inf]))])
        with pytest.raises(NumericError, match="bad"):
            grad(lambda p: dc.vsum(p["ok"]), theta)

    def test_nonfinite_loss_raises(self):
        theta = make_theta([1e308])
        with np.errstate(over="ignore"), pytest.raises(NumericError, match="non-finite"):
            grad(lambda p: dc.exp(dc.vsum(p["theta"] * p["theta"])), theta)


class TestHvp:
    def test_quadratic_hvp_is_matrix_vector_product(self):
        a = np.array([[2.0, 1.0], [1.0, 4.0]])
        loss = quadratic_loss(a)
        theta = make_theta([0.3, -1.2])
        v = make_theta([1.0, 2.0])
        hv = hvp(loss, theta, v)
        np.testing.assert_allclose(hv.flat, a @ v.flat, rtol=1e-12)

    def test_zero_direction_gives_zero(self):
        loss = quadratic_loss(np.eye(3))
        theta = make_theta([1.0, 2.0, 3.0])
        hv = hvp(loss, theta, make_theta(np.zeros(3)))
        np.testing.assert_array_equal(hv.flat, np.zeros(3))

    def test_mlp_hvp_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 2))
        y = rng.normal(size=(6, 2))
        loss = mlp_loss(x, y)
        theta = mlp_theta(seed=5)
        v = theta.with_flat(rng.normal(size=theta.total_dim))
        hv = hvp(loss, theta, v)
        hv_fd = fd_hvp(loss, theta, v)
        assert rel_err(hv.flat, hv_fd.flat) < 1e-4

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 2))
        y = rng.normal(size=(5, 2))
        loss = mlp_loss(x, y)
        theta = mlp_theta(seed=9)
        u = theta.with_flat(rng.normal(size=theta.total_dim))
        v = theta.with_flat(rng.normal(size=theta.total_dim))
        a, b = 0.7, -1.3
        combined = hvp(loss, theta, theta.with_flat(a * u.flat + b * v.flat))
        separate = a * hvp(loss, theta, u).flat + b * hvp(loss, theta, v).flat
        np.testing.assert_allclose(combined.flat, separate, atol=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 2))
        y = rng.normal(size=(5, 2))
        loss = mlp_loss(x, y)
        theta = mlp_theta(seed=13)
        u = theta.with_flat(rng.normal(size=theta.total_dim))
        v = theta.with_flat(rng.normal(size=theta.total_dim))
        left = u.dot(hvp(loss, theta, v))
        right = v.dot(hvp(loss, theta, u))
        assert abs(left - right) <= 1e-8 * max(abs(left), abs(right), 1e-30)

    def test_dimension_mismatch_is_contract_error(self):
        loss = quadratic_loss(np.eye(2))
        with pytest.raises(ContractError):
            hvp(loss, make_theta([1.0, 2.0]), make_theta([1.0, 2.0, 3.0]))


class TestDeterminism:
    def test_grad_bit_identical_across_runs(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 2))
        loss = mlp_loss(x, y)
        theta = mlp_theta(seed=17)
        g1 = grad(loss, theta)
        g2 = grad(loss, theta)
        assert np.array_equal(g1.flat, g2.flat)

    def test_hvp_bit_identical_across_runs(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 2))
        loss = mlp_loss(x, y)
        theta = mlp_theta(seed=19)
        v = theta.with_flat(rng.normal(size=theta.total_dim))
        h1 = hvp(loss, theta, v)
        h2 = hvp(loss, theta, v)
        assert np.array_equal(h1.flat, h2.flat)

    def test_two_reverse_passes_over_one_tape_agree_bitwise(self):
        rng = np.random.default_rng(29)
        x = rng.normal(size=(4, 2))
        y = rng.normal(size=(4, 2))
        theta = mlp_theta(seed=23)
        with Tape() as tape:
            leaves = theta.leaves()
            loss = mlp_loss(x, y)(leaves)
        ordered = [leaves[n] for n in theta.names]
        first = tape.gradient(loss, ordered)
        second = tape.gradient(loss, ordered)
        for a, b in zip(first, second):
            assert np.array_equal(a.data, b.data)


class TestParameterVector:
    def test_flatten_unflatten_identity(self):
        rng = np.random.default_rng(1)
        items = [("a", rng.normal(size=(3, 2))), ("b", rng.normal(size=(4,)))]
        pv = ParameterVector.from_arrays(items)
        rebuilt = ParameterVector.from_arrays(pv.to_dict().items())
        assert rebuilt.same_structure(pv)
        assert np.array_equal(rebuilt.flat, pv.flat)

    @given(
        st.lists(
            st.tuples(st.integers(1, 4), st.integers(1, 4)),
            min_size=1,
            max_size=4,
        ),
        st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_flatten_unflatten_identity_property(self, shapes, seed):
        rng = np.random.default_rng(seed)
        items = [(f"s{i}", rng.normal(size=shape)) for i, shape in enumerate(shapes)]
        pv = ParameterVector.from_arrays(items)
        rebuilt = ParameterVector.from_arrays(pv.to_dict().items())
        assert np.array_equal(rebuilt.flat, pv.flat)
        assert rebuilt.shapes == pv.shapes

    def test_total_dim_checks(self):
        with pytest.raises(ContractError):
            ParameterVector(["a"], [(2, 2)], np.zeros(3))

    def test_arithmetic(self):
        pv = ParameterVector.from_arrays([("a", np.array([1.0, 2.0]))])
        qv = ParameterVector.from_arrays([("a", np.array([10.0, 20.0]))])
        assert np.array_equal((pv + qv).flat, [11.0, 22.0])
        assert np.array_equal((qv - pv).flat, [9.0, 18.0])
        assert np.array_equal((2.0 * pv).flat, [2.0, 4.0])
        assert pv.dot(qv) == pytest.approx(50.0)
        assert pv.norm() == pytest.approx(np.sqrt(5.0))


class TestPrimitives:
    def test_broadcast_add_gradients(self):
        theta = ParameterVector.from_arrays([("b", np.array([1.0, 2.0]))])

        def loss(params):
            mat = dc.constant(np.ones((3, 2)))
            return dc.vsum(mat + params["b"])

        g = grad(loss, theta)
        np.testing.assert_array_equal(g.flat, [3.0, 3.0])

    def test_take_put_roundtrip_gradient(self):
        theta = ParameterVector.from_arrays([("w", np.arange(6.0).reshape(1, 6))])
        idx = np.array([0, 2, 2, 5])

        def loss(params):
            return dc.vsum(dc.take_cols(params["w"], idx))

        g = grad(loss, theta)
        np.testing.assert_array_equal(g.segment("w"), [[1.0, 0.0, 2.0, 0.0, 0.0, 1.0]])

    def test_pad_crop_inverse(self):
        x = dc.constant(np.arange(16.0).reshape(1, 1, 4, 4))
        padded = dc.pad2d(x, 2)
        assert padded.shape == (1, 1, 8, 8)
        back = dc.crop2d(padded, 2)
        assert np.array_equal(back.data, x.data)

    def test_matmul_shape_contract(self):
        with pytest.raises(ContractError):
            dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))
