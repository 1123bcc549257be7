"""Continuous adjoint gradient of the trajectory-wise loss."""

from __future__ import annotations

from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from . import ode
from .dynamics import _strip, adjoint_system, resolve, theta_digest
from .reference import make_rng


class AdjointState(dict):
    """Adjoint blocks keyed like the system state (``x, xi, ys, zetas``) at time ``t``."""


def adjoint_rhs(params, spec, t, s, a):
    """``-(a^T dpsi/ds + dg/ds)`` for the mean-over-probes running cost.

    ``s`` and ``a`` are SystemStates; the log-density block is ignored.
    """
    field, theta = resolve(params)
    Fs = adjoint_system(field, spec)
    _, da, _ = ode.adjoint_dynamics(Fs, float(t), _strip(s), _strip(a), theta)
    return da


def adjoint_rhs_on_grid(params, spec, traj, t, a):
    """As :func:`adjoint_rhs`, reading the state from a stored trajectory."""
    k = np.flatnonzero(np.isclose(traj.time_grid, t, rtol=0.0, atol=1e-12))
    if k.size != 1:
        raise ValueError(f"t={t} is not a node of the trajectory grid")
    return adjoint_rhs(params, spec, traj.time_grid[k[0]], traj.state_at(k[0]), a)


@lru_cache(maxsize=64)
def _backward_fn(field, spec, steps):
    Fs = adjoint_system(field, spec)

    def run(theta, states):
        return ode.backward(Fs, theta, _strip(states), spec.T, steps)

    return jax.jit(run)


@lru_cache(maxsize=64)
def _integrand_fn(field, spec):
    Fs = adjoint_system(field, spec)
    return jax.jit(lambda t, s, a, theta: ode.param_integrand(Fs, t, s, a, theta))


def solve(params, traj):
    """Backward solve; returns ``(gradient, adjoints on the grid)``."""
    field, theta = resolve(params)
    if theta_digest(theta) != traj.theta_digest:
        raise ValueError("trajectory was produced with different parameters")
    return _backward_fn(field, traj.spec, traj.steps)(theta, traj.states)


def gradient(params, spec, traj, time_samples=None, seed=0):
    """Gradient of the mean trajectory loss of ``traj`` w.r.t. the parameters.

    By default the parameter integral is carried by the backward RK4 solve.
    With ``time_samples`` it is estimated as ``T`` times the mean integrand
    over that many uniformly drawn grid nodes.
    """
    if traj.spec != spec:
        raise ValueError("trajectory belongs to a different problem")
    grad, adjoints = solve(params, traj)
    if time_samples is None:
        return np.asarray(grad)
    field, theta = resolve(params)
    fn = _integrand_fn(field, spec)
    rng = make_rng(seed, 7)
    ks = rng.integers(0, traj.steps + 1, size=int(time_samples))
    total = jnp.zeros_like(theta)
    for k in ks:
        s = _strip(traj.state_at(k))
        a = jax.tree_util.tree_map(lambda x: x[k], adjoints)
        total = total + fn(float(traj.time_grid[k]), s, a, theta)
    return np.asarray(spec.T * total / len(ks))
