import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from einn.net import (
    AnalyticField, NetParams, eval_full, init_params, load_checkpoint, mlp_arch, param_count,
    save_checkpoint, score_rhs,
)


def test_paper_architecture_size():
    arch = mlp_arch(2)
    assert arch == (3,) + (20,) * 7 + (2,)
    n = 3 * 20 + 20 + 6 * (20 * 20 + 20) + 20 * 2 + 2
    assert n == 2642
    assert param_count(arch) == n
    assert init_params(arch, 0).theta.size == n


def test_init_deterministic_and_zero_biases():
    arch = (3, 4, 5, 2)
    a, b = init_params(arch, 7), init_params(arch, 7)
    np.testing.assert_array_equal(a.theta, b.theta)
    off = 0
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        w = a.theta[off : off + n_in * n_out]
        bound = np.sqrt(6.0 / (n_in + n_out))
        assert np.all(np.abs(w) <= bound)
        off += n_in * n_out
        np.testing.assert_array_equal(a.theta[off : off + n_out], 0.0)
        off += n_out
    assert not np.array_equal(a.theta, init_params(arch, 8).theta)


def test_bad_arch():
    with pytest.raises(ValueError):
        init_params((), 0)
    with pytest.raises(ValueError):
        init_params((3, 0, 2), 0)
    with pytest.raises(ValueError):
        NetParams(np.zeros(3), (3, 2))  # input must be d + 1
    with pytest.raises(ValueError):
        NetParams(np.zeros(3), (3, 2, 2))


def test_zero_network():
    p = NetParams(np.zeros(param_count((3, 6, 2))), (3, 6, 2))
    ev = eval_full(p, 0.3, [0.1, 0.2])
    for v in (ev.value, ev.jac, ev.grad_div):
        np.testing.assert_array_equal(v, 0.0)
    assert ev.div == 0.0
    np.testing.assert_array_equal(score_rhs(p, 0.3, [0.1, 0.2], [1.0, 2.0]), 0.0)


def linear_params(A, b):
    # single layer acting on [t, x]: f = A x + b t
    d = A.shape[0]
    W = np.concatenate([b[:, None], A], axis=1)
    return NetParams(np.concatenate([W.ravel(), np.zeros(d)]), (d + 1, d))


def test_linear_field():
    A = np.array([[0.5, -1.0], [2.0, 0.1]])
    p = linear_params(A, np.array([1.0, -2.0]))
    ev = eval_full(p, 0.5, [0.3, 0.4])
    np.testing.assert_allclose(ev.value, A @ [0.3, 0.4] + 0.5 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(ev.jac, A)
    np.testing.assert_array_equal(ev.grad_div, 0.0)
    xi = np.array([0.7, -0.2])
    np.testing.assert_allclose(score_rhs(p, 0.5, [0.3, 0.4], xi), -A.T @ xi)


def test_nonfinite_input():
    p = init_params((3, 4, 2), 0)
    with pytest.raises(ValueError):
        eval_full(p, 0.0, [np.nan, 0.0])
    with pytest.raises(ValueError):
        eval_full(p, np.inf, [0.0, 0.0])


@given(st.integers(0, 10_000), st.floats(0, 1), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_div_is_trace_and_fd_agreement(seed, t, x):
    p = init_params((4, 6, 6, 3), seed)
    p = p.replace(p.theta + 0.2 * np.random.default_rng(seed).normal(size=p.theta.size))
    x = np.array(x)
    ev = eval_full(p, t, x)
    assert abs(ev.div - np.trace(ev.jac)) <= 1e-12
    h = 1e-5
    jac_fd = np.stack([(eval_full(p, t, x + h * e).value - eval_full(p, t, x - h * e).value) / (2 * h)
                       for e in np.eye(3)], axis=1)
    assert np.abs(ev.jac - jac_fd).max() <= 1e-5 * max(1.0, np.abs(jac_fd).max())
    gd_fd = np.array([(eval_full(p, t, x + h * e).div - eval_full(p, t, x - h * e).div) / (2 * h) for e in np.eye(3)])
    assert np.abs(ev.grad_div - gd_fd).max() <= 1e-5 * max(1.0, np.abs(gd_fd).max())


def test_score_transport_linear_gaussian():
    # x' = A x from N(0, S0): score of N(0, e^{At} S0 e^{A^T t}) is reproduced by integrating score_rhs
    A = np.array([[-0.3, 0.8], [-0.5, 0.2]])
    p = linear_params(A, np.zeros(2))
    S0 = np.array([[0.5, 0.1], [0.1, 0.3]])
    x = np.array([0.4, -0.7])
    xi = -np.linalg.solve(S0, x)
    h = 1e-3

    def rhs(t, s):
        return np.concatenate([eval_full(p, t, s[:2]).value, score_rhs(p, t, s[:2], s[2:])])

    s = np.concatenate([x, xi])
    for k in range(1000):
        t = k * h
        k1 = rhs(t, s)
        k2 = rhs(t + h / 2, s + h / 2 * k1)
        k3 = rhs(t + h / 2, s + h / 2 * k2)
        k4 = rhs(t + h, s + h * k3)
        s = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    E = expm(A)
    S1 = E @ S0 @ E.T
    np.testing.assert_allclose(s[:2], E @ x, atol=1e-6)
    np.testing.assert_allclose(s[2:], -np.linalg.solve(S1, s[:2]), atol=1e-6)


def test_analytic_field_matches_net_interface():
    f = AnalyticField(lambda t, x: jnp.array([x[0] ** 2, x[1] ** 2]), 2)
    ev = eval_full(f, 0.0, [1.0, 2.0])
    np.testing.assert_allclose(ev.grad_div, [2.0, 2.0])
    assert ev.div == pytest.approx(6.0)


def test_checkpoint_round_trip(tmp_path):
    p = init_params((3, 5, 2), 4)
    p = p.replace(p.theta + np.random.default_rng(0).normal(size=p.theta.size) * 1e-3)
    path = tmp_path / "a.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.arch == p.arch
    np.testing.assert_array_equal(q.theta, p.theta)
    assert not [f for f in tmp_path.iterdir() if f.name.startswith(".tmp")]
    (tmp_path / "bad.ckpt").write_text("nope\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
