import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracritz.core_ad import (
    FnnParams,
    FnnShape,
    NonFiniteError,
    ShapeError,
    as_node,
    exp,
    fnn_forward,
    fnn_grad_input,
    fnn_graph,
    loss_param_gradient,
    square,
)


def random_params(depth, width, input_dim, seed):
    shape = FnnShape(depth, width, input_dim)
    rng = np.random.default_rng(seed)
    return FnnParams(shape, rng.normal(size=shape.size))


def straight_line(params, z):
    """Reference evaluation with plain numpy, no tape."""
    h = np.asarray(z, dtype=float)
    for w, b in params.layers():
        h = np.maximum(w @ h + b, 0.0)
    return float(params.output @ h)


def central_diff(fun, x, step):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return out


class TestForward:
    def test_zero_network(self):
        p = FnnParams(FnnShape(2, 5, 3))
        assert fnn_forward(p, [0.3, -1.0, 2.0]) == 0.0

    def test_single_neuron(self):
        p = FnnParams.from_arrays([[[1.0, 0.0]]], [[0.0]], [1.0])
        assert fnn_forward(p, [2.0, 5.0]) == 2.0
        assert fnn_forward(p, [-2.0, 5.0]) == 0.0

    def test_matches_straight_line(self):
        p = random_params(2, 4, 2, seed=3)
        z = np.array([0.3, 0.7])
        assert fnn_forward(p, z) == pytest.approx(straight_line(p, z), rel=1e-14)

    def test_batch_matches_pointwise(self):
        p = random_params(3, 6, 3, seed=1)
        z = np.random.default_rng(0).normal(size=(7, 3))
        batch = fnn_forward(p, z)
        assert batch.shape == (7,)
        for k in range(7):
            assert batch[k] == pytest.approx(straight_line(p, z[k]), rel=1e-13, abs=1e-14)

    def test_shape_mismatch(self):
        p = random_params(2, 4, 3, seed=0)
        with pytest.raises(ShapeError):
            fnn_forward(p, [1.0, 2.0])

    def test_params_size_mismatch(self):
        with pytest.raises(ShapeError):
            FnnParams(FnnShape(2, 4, 3), np.zeros(5))

    def test_output_homogeneous(self):
        p = random_params(2, 8, 3, seed=4)
        z = np.array([0.1, -0.4, 0.9])
        q = p.copy()
        q.output[:] *= 3.0
        assert fnn_forward(q, z) == pytest.approx(3.0 * fnn_forward(p, z), rel=1e-15)

    def test_deterministic(self):
        p = random_params(3, 16, 4, seed=5)
        z = np.random.default_rng(1).normal(size=(50, 4))
        np.testing.assert_array_equal(fnn_forward(p, z), fnn_forward(p, z))


class TestInputGradient:
    def test_zero_network(self):
        p = FnnParams(FnnShape(2, 5, 3))
        np.testing.assert_array_equal(fnn_grad_input(p, [0.1, 0.2, 0.3]), np.zeros(3))

    def test_single_neuron_regions(self):
        p = FnnParams.from_arrays([[[1.0, 0.0]]], [[0.0]], [1.0])
        np.testing.assert_array_equal(fnn_grad_input(p, [0.5, 1.0]), [1.0, 0.0])
        np.testing.assert_array_equal(fnn_grad_input(p, [-0.5, 1.0]), [0.0, 0.0])

    def test_kink_uses_zero(self):
        p = FnnParams.from_arrays([[[1.0, 0.0]]], [[0.0]], [1.0])
        np.testing.assert_array_equal(fnn_grad_input(p, [0.0, 1.0]), [0.0, 0.0])

    def test_finite_differences(self):
        p = random_params(2, 8, 2, seed=11)
        z = np.array([0.2, 0.7])
        fd = central_diff(lambda v: straight_line(p, v), z, 1e-6)
        np.testing.assert_allclose(fnn_grad_input(p, z), fd, rtol=1e-6)

    def test_constant_in_linear_region(self):
        p = random_params(2, 8, 3, seed=2)
        z = np.array([0.3, -0.2, 0.5])
        g1 = fnn_grad_input(p, z)
        g2 = fnn_grad_input(p, z + 1e-9)
        np.testing.assert_array_equal(g1, g2)


class TestParamGradient:
    def test_zero_params(self):
        shape = FnnShape(2, 4, 2)
        z = np.array([[0.3, 0.4]])

        def loss(theta):
            out, _ = fnn_graph(shape, theta, z)
            return square(out).sum()

        value, grad = loss_param_gradient(loss, np.zeros(shape.size))
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros(shape.size))

    @pytest.mark.parametrize("w,a0", [(0.7, 1.3), (2.0, -0.5)])
    def test_single_neuron_gradient_norm(self, w, a0):
        # flat layout: W (1x2), b (1), a (1)
        shape = FnnShape(1, 1, 2)
        z = np.array([[1.0, 0.0]])

        def loss(theta):
            _, g = fnn_graph(shape, theta, z)
            return square(g).sum()

        value, grad = loss_param_gradient(loss, [w, 0.0, 0.0, a0])
        assert value == pytest.approx(a0 ** 2 * w ** 2, rel=1e-15)
        assert grad[3] == pytest.approx(2 * a0 * w ** 2, rel=1e-15)
        assert grad[0] == pytest.approx(2 * a0 ** 2 * w, rel=1e-15)

    def test_mixed_expression_matches_fd(self):
        shape = FnnShape(2, 6, 3)
        z = np.random.default_rng(7).normal(size=(20, 3))
        flat0 = np.random.default_rng(8).normal(size=shape.size)

        def loss(theta):
            out, g = fnn_graph(shape, theta, z)
            scale = exp(theta[:1] * 0.1)
            return (square(g).sum(axis=1) * out * scale).sum()

        _, grad = loss_param_gradient(loss, flat0)
        fd = central_diff(lambda f: loss(as_node(f)).value.item(), flat0, 1e-5)
        big = np.abs(fd) > 1e-8
        np.testing.assert_allclose(grad[big], fd[big], rtol=1e-6)

    def test_non_finite_names_node(self):
        def loss(theta):
            return exp(theta * 1e3).sum()

        with pytest.raises(NonFiniteError, match="exp"):
            loss_param_gradient(loss, [1.0])

    def test_non_finite_names_network_layer(self):
        shape = FnnShape(2, 3, 2)
        z = np.array([[1e300, 1e300]])

        def loss(theta):
            out, _ = fnn_graph(shape, theta, z, tag="net")
            return out.sum()

        with pytest.raises(NonFiniteError, match="net.layer"):
            loss_param_gradient(loss, np.full(shape.size, 1e10))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), k=st.integers(-6, 6))
def test_forward_scales_exactly_with_output_layer(seed, k):
    # powers of two keep the scaling free of rounding
    p = random_params(2, 5, 3, seed)
    z = np.random.default_rng(seed).normal(size=(4, 3))
    q = p.copy()
    q.output[:] *= 2.0 ** k
    np.testing.assert_array_equal(fnn_forward(q, z), 2.0 ** k * fnn_forward(p, z))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(-10.0, 10.0, allow_subnormal=False))
def test_forward_scales_with_output_layer(seed, scale):
    p = random_params(2, 5, 3, seed)
    z = np.random.default_rng(seed).normal(size=(4, 3))
    q = p.copy()
    q.output[:] *= scale
    base = fnn_forward(p, z)
    np.testing.assert_allclose(fnn_forward(q, z), scale * base, rtol=1e-13,
                               atol=1e-300 + 1e-13 * np.abs(scale) * np.abs(p.output).sum())
