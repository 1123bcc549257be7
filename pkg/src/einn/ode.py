"""Fixed-step RK4 over pytrees, with a grid-aligned continuous adjoint.

A system is a function ``F(t, s, theta) -> (ds, g, aux)`` returning the state
derivative, the running cost and an integer diagnostic. The forward pass
stores the state at every grid node and integrates the cost alongside the
state, so the loss is fourth-order accurate in the step.

The backward pass solves ``da/dt = -(a^T dpsi/ds + dg/ds)`` with ``a(T) = 0``
and accumulates ``int a^T dpsi/dtheta + dg/dtheta dt``. Each backward step
restarts the state from the stored node at its right end and integrates the
state, adjoint and parameter accumulator together with RK4, so the states
seen by the adjoint stay tied to the grid.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
from jax import tree_util as tu


def _axpy(a, x, y):
    """``y + a * x`` over matching pytrees."""
    return tu.tree_map(lambda xi, yi: yi + a * xi, x, y)


def _combine(s, h, k1, k2, k3, k4):
    return tu.tree_map(lambda si, a, b, c, d: si + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d), s, k1, k2, k3, k4)


def rk4_step(F, theta, t, s, h):
    """One RK4 step; returns ``(s_next, cost_increment, g_at_t, aux_sum)``."""
    k1, g1, a1 = F(t, s, theta)
    k2, g2, a2 = F(t + 0.5 * h, _axpy(0.5 * h, k1, s), theta)
    k3, g3, a3 = F(t + 0.5 * h, _axpy(0.5 * h, k2, s), theta)
    k4, g4, a4 = F(t + h, _axpy(h, k3, s), theta)
    s_next = _combine(s, h, k1, k2, k3, k4)
    inc = (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
    return s_next, inc, g1, a1 + a2 + a3 + a4


def forward(F, theta, s0, T, steps):
    """Integrate on the uniform grid ``k T / steps``.

    Returns ``(states, node_costs, loss, aux)`` where ``states`` stacks the
    ``steps + 1`` node states along a new leading axis.
    """
    h = T / steps

    def body(carry, k):
        s, loss, aux = carry
        s_next, inc, g, a = rk4_step(F, theta, k * h, s, h)
        return (s_next, loss + inc, aux + a), (s_next, g)

    _, g0, _ = F(0.0, s0, theta)
    zero_loss = jnp.zeros_like(g0)
    (s_end, loss, aux), (states, costs) = jax.lax.scan(
        body, (s0, zero_loss, jnp.zeros((), dtype=jnp.int64)), jnp.arange(steps)
    )
    _, g_end, _ = F(T, s_end, theta)
    states = tu.tree_map(lambda a, b: jnp.concatenate([a[None], b], axis=0), s0, states)
    costs = jnp.concatenate([costs, g_end[None]], axis=0)
    return states, costs, loss, aux


def adjoint_dynamics(Fs, t, s, a, theta):
    """``(ds, da, dq)`` for a scalar-cost system ``Fs(t, s, theta) -> (ds, g)``."""
    (ds, g), pullback = jax.vjp(lambda s_, th: Fs(t, s_, th), s, theta)
    gs, gth = pullback((a, jnp.ones_like(g)))
    return ds, tu.tree_map(jnp.negative, gs), -gth


def backward(Fs, theta, states, T, steps):
    """Adjoint solve over stored node states.

    Returns ``(grad, adjoints)`` with ``adjoints`` stacked on the node grid
    (``adjoints[k]`` is ``a(t_k)``; ``a(T) = 0``).
    """
    h = T / steps

    def rhs(t, y):
        s, a, _ = y
        ds, da, dq = adjoint_dynamics(Fs, t, s, a, theta)
        return (ds, da, dq)

    def body(carry, k):
        a, q = carry
        s = tu.tree_map(lambda x: x[k + 1], states)
        t = (k + 1) * h
        y = (s, a, q)
        k1 = rhs(t, y)
        k2 = rhs(t - 0.5 * h, _axpy(-0.5 * h, k1, y))
        k3 = rhs(t - 0.5 * h, _axpy(-0.5 * h, k2, y))
        k4 = rhs(t - h, _axpy(-h, k3, y))
        _, a_new, q_new = _combine(y, -h, k1, k2, k3, k4)
        return (a_new, q_new), a_new

    s_last = tu.tree_map(lambda x: x[-1], states)
    a_T = tu.tree_map(jnp.zeros_like, s_last)
    (a0, grad), adjoints = jax.lax.scan(body, (a_T, jnp.zeros_like(theta)), jnp.arange(steps - 1, -1, -1))
    adjoints = tu.tree_map(lambda x, last: jnp.concatenate([x[::-1], last[None]], axis=0), adjoints, a_T)
    return grad, adjoints


def param_integrand(Fs, t, s, a, theta):
    """``a^T dpsi/dtheta + dg/dtheta`` at one time."""
    return -adjoint_dynamics(Fs, t, s, a, theta)[2]
