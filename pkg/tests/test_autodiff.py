import math

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from einn.autodiff import (
    Add, Affine, Chain, Dense, DualTower, Identity, Product, Scale, Tanh,
    directional_derivative, grad_divergence, jacobian, param_vjp,
)

square = Product(Identity(), Identity())


def small_net(seed, d_in=2, width=5, d_out=2):
    rng = np.random.default_rng(seed)
    net = Chain(Dense(d_in, width), Tanh(), Dense(width, width), Tanh(), Dense(width, d_out))
    return net, rng.normal(size=net.n_params)


def fd(fn, x, v, h=1e-5):
    return (np.asarray(fn(x + h * v)) - np.asarray(fn(x - h * v))) / (2 * h)


def test_examples():
    assert float(directional_derivative(square, [3.0], [1.0], 1)[0]) == 6.0
    assert float(directional_derivative(Tanh(), [0.0], [1.0], 2)[0]) == 0.0
    assert float(directional_derivative(Tanh(), [0.5], [1.0], 1)[0]) == pytest.approx(1 / math.cosh(0.5) ** 2, rel=1e-12)
    assert float(directional_derivative(Tanh(), [0.5], [1.0], 1)[0]) == pytest.approx(0.786448, abs=1e-6)


def test_jacobian_examples():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(jacobian(Affine(A), [0.3, -1.0]), A)
    # (x1 x2, x1 + x2)
    fn = Add(Product(Affine([[1.0, 0.0], [0.0, 0.0]]), Affine([[0.0, 1.0], [0.0, 0.0]])), Affine([[0, 0], [1.0, 1.0]]))
    np.testing.assert_allclose(jacobian(fn, [2.0, 3.0]), [[3.0, 2.0], [1.0, 1.0]], atol=1e-15)
    np.testing.assert_array_equal(jacobian(Identity(), [1.0, 2.0, 3.0]), np.eye(3))


def test_grad_divergence_examples():
    np.testing.assert_array_equal(grad_divergence(Affine([[1.0, 2.0], [3.0, 4.0]]), [0.1, 0.2]), [0.0, 0.0])
    np.testing.assert_allclose(grad_divergence(square, [1.0, 2.0]), [2.0, 2.0])
    swap = Affine([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(grad_divergence(swap, [0.7, -0.3]), [0.0, 0.0])


def test_param_vjp_examples():
    lin = Dense(1, 1)  # theta = [w, b]
    np.testing.assert_allclose(param_vjp(lin, [2.0], [0.5, 0.0], [1.0]), [2.0, 1.0])
    net = Chain(Dense(1, 1), Tanh())
    np.testing.assert_allclose(param_vjp(net, [1.0], [0.0, 0.0], [1.0])[0], 1.0)
    np.testing.assert_array_equal(param_vjp(net, [1.0], [0.3, 0.1], [0.0]), [0.0, 0.0])


def test_errors():
    with pytest.raises(ValueError):
        directional_derivative(Tanh(), [0.0], [1.0], 4)
    with pytest.raises(ValueError):
        directional_derivative(Tanh(), [0.0], [1.0], 0)
    with pytest.raises(TypeError):
        directional_derivative(np.sin, [0.0], [1.0], 1)
    with pytest.raises(TypeError):
        Chain(Tanh(), np.tanh)
    with pytest.raises(ValueError):
        jacobian(Tanh(), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        param_vjp(Dense(1, 1), [1.0], [0.0, 0.0], [1.0, 2.0])
    a = DualTower.seed(jnp.ones(2), [jnp.ones(2)])
    b = DualTower.seed(jnp.ones(2), [jnp.ones(2), jnp.ones(2)])
    with pytest.raises(ValueError):
        a + b


def test_zero_coefficients_reproduce_real_arithmetic():
    x = jnp.array([0.3, -1.2])
    z = DualTower.seed(x, [jnp.zeros(2), jnp.zeros(2)])
    out = (z * z + z).tanh()
    np.testing.assert_array_equal(out.value, jnp.tanh(x * x + x))
    assert all(float(jnp.max(jnp.abs(jnp.asarray(p)))) == 0.0 for p in out.parts[1:])


vec2 = st.lists(st.floats(-2, 2), min_size=2, max_size=2)


@given(vec2, vec2, st.integers(0, 1000))
def test_first_order_matches_fd(x, v, seed):
    net, theta = small_net(seed)
    x, v = np.array(x), np.array(v)
    got = np.asarray(directional_derivative(net, x, v, 1, theta))
    ref = fd(lambda p: net.apply(theta, jnp.asarray(p)), x, v)
    scale = max(1.0, np.abs(ref).max())
    assert np.abs(got - ref).max() <= 1e-6 * scale


@given(vec2, vec2, st.integers(0, 1000))
def test_nesting_consistency(x, v, seed):
    net, theta = small_net(seed)
    x, v = np.array(x), np.array(v)
    d2 = np.asarray(directional_derivative(net, x, v, 2, theta))
    d1 = lambda p: directional_derivative(net, p, v, 1, theta)
    ref = fd(d1, x, v, h=1e-4)
    assert np.abs(d2 - ref).max() <= 1e-6 * max(1.0, np.abs(ref).max())
    d3 = np.asarray(directional_derivative(net, x, v, 3, theta))
    ref3 = fd(lambda p: directional_derivative(net, p, v, 2, theta), x, v, h=1e-4)
    assert np.abs(d3 - ref3).max() <= 1e-5 * max(1.0, np.abs(ref3).max())


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_nesting_exact_on_polynomial(x):
    # f(x) = (x1^2 x2, x1 x2^2): second derivative along v equals d/de of the first
    x = np.array(x)
    cube = Product(Product(Identity(), Identity()), Affine([[0.0, 1.0], [1.0, 0.0]]))
    v = np.array([0.7, -0.4])
    d2 = np.asarray(directional_derivative(cube, x, v, 2))
    # exact: for f_i = x_i^2 x_j, d2 = 2 v_i^2 x_j + 4 x_i v_i v_j
    xs = x[::-1]
    vs = v[::-1]
    exact = 2 * v**2 * xs + 4 * x * v * vs
    np.testing.assert_allclose(d2, exact, rtol=1e-10, atol=1e-12)
    d3 = np.asarray(directional_derivative(cube, x, v, 3))
    np.testing.assert_allclose(d3, 6 * v**2 * vs, rtol=1e-10)


@given(st.integers(0, 1000), vec2)
def test_perp_gradient_field_is_divergence_free(seed, x):
    # f = J grad(phi) with phi(x) = sum_k c_k tanh(w_k . x + b_k), J the rotation by 90 degrees
    rng = np.random.default_rng(seed)
    W, b, c = rng.normal(size=(6, 2)), rng.normal(size=6), rng.normal(size=6)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    # grad phi = W^T (c * tanh'(Wx+b)); tanh' = 1 - tanh^2
    inner = Chain(Affine(W, b), Tanh())
    sech2 = Add(Affine(np.zeros((6, 2)), np.ones(6)), Scale(-1.0, Product(inner, inner)))
    field = Chain(sech2, Affine(rot @ W.T @ np.diag(c)))
    J = np.asarray(jacobian(field, np.array(x)))
    assert abs(np.trace(J)) <= 1e-12


@given(st.integers(0, 200))
def test_param_vjp_matches_fd(seed):
    net, theta = small_net(seed)
    rng = np.random.default_rng(seed + 1)
    x, v, cov = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
    # sensitivity of a derived quantity: the directional derivative of the net
    fn = lambda p, th: directional_derivative(net, p, v, 1, th)
    g = np.asarray(param_vjp(fn, x, theta, cov))
    for k in rng.choice(theta.size, 10, replace=False):
        e = np.zeros_like(theta)
        e[k] = 1e-6
        ref = (cov @ np.asarray(fn(x, theta + e)) - cov @ np.asarray(fn(x, theta - e))) / 2e-6
        assert abs(g[k] - ref) <= 1e-5 * max(1.0, abs(ref))


def test_grad_divergence_matches_fd_of_divergence():
    net, theta = small_net(3)
    x = np.array([0.4, -0.9])

    def div(p):
        return float(np.trace(np.asarray(jacobian(net, p, theta))))

    ref = np.array([(div(x + 1e-5 * e) - div(x - 1e-5 * e)) / 2e-5 for e in np.eye(2)])
    np.testing.assert_allclose(grad_divergence(net, x, theta), ref, rtol=1e-6, atol=1e-9)
