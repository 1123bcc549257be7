"""The ODE-constrained form of the self-consistency loss.

The augmented state carries a batch of probe trajectories ``x`` with their
transported scores ``xi`` and log-densities, plus the shared particle batch
``ys`` with scores ``zetas`` that feeds the convolution estimate. The running
cost of a probe is the squared mismatch between the hypothesis velocity and
the velocity it induces.
"""

from __future__ import annotations

import csv
import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import ode
from .kernels import BIOT_SAVART, KernelSpec, conv_field
from .net import AnalyticField, NetField, NetParams, score_rhs_batch
from .reference import Reference, make_reference


class PropagationError(RuntimeError):
    """A trajectory produced non-finite values."""


class SystemState(NamedTuple):
    x: jnp.ndarray  # (B, d) probes
    xi: Optional[jnp.ndarray]  # (B, d) probe scores
    ys: jnp.ndarray  # (N, d) convolution batch
    zetas: Optional[jnp.ndarray]  # (N, d) batch scores
    logdens: Optional[jnp.ndarray]  # (B,) log density along the probes

    @property
    def has_scores(self):
        return self.xi is not None


@dataclass(frozen=True)
class ProblemSpec:
    d: int
    nu: float
    T: float
    kernel: KernelSpec
    reference: Reference
    stiffness: float = 0.0  # V(x) = stiffness |x|^2 / 2; 0 means no potential

    def __post_init__(self):
        if self.kernel.dim != self.d or self.reference.dim != self.d:
            raise ValueError("kernel, reference and problem dimensions differ")
        if self.nu < 0 or not self.T > 0:
            raise ValueError("need nu >= 0 and T > 0")

    @property
    def needs_scores(self):
        """Whether the running cost reads the transported scores."""
        return self.nu > 0 or self.kernel.kind == BIOT_SAVART


def make_problem(name, T=1.0, clamp_eps=None, **ref_kw):
    """Problem spec for one of the reference configurations."""
    ref = make_reference(name, **ref_kw)
    kw = {} if clamp_eps is None else {"clamp_eps": clamp_eps}
    kernel = KernelSpec(ref.kernel_kind, ref.dim, **kw)
    return ProblemSpec(d=ref.dim, nu=ref.nu, T=T, kernel=kernel, reference=ref, stiffness=ref.stiffness)


@lru_cache(maxsize=None)
def net_field(arch):
    return NetField(arch)


def resolve(params):
    """``(field, theta)`` for NetParams or an AnalyticField."""
    if isinstance(params, NetParams):
        return net_field(params.arch), jnp.asarray(params.theta)
    if isinstance(params, AnalyticField):
        return params, jnp.zeros(0)
    raise TypeError(f"expected NetParams or AnalyticField, got {type(params).__name__}")


# ---------------------------------------------------------------------------
# transition and running cost


def system(field, spec, t, s, theta):
    """``(ds, g, clamp_count)``: transition, per-probe running cost, diagnostics."""
    B = s.x.shape[0]
    pts = jnp.concatenate([s.x, s.ys], axis=0)
    if s.has_scores:
        derivs = field.derivatives(theta, t, pts)
        v, jac, div, _ = derivs
        scores = jnp.concatenate([s.xi, s.zetas], axis=0)
        dscore = score_rhs_batch(derivs, scores)
        dxi, dzeta = dscore[:B], dscore[B:]
    else:
        # batch particles only need values; probe Jacobians only for the log-density
        v = field.value(theta, t, pts)
        div = None
        if s.logdens is not None:
            _, jac = field.jacobian(theta, t, s.x)
            div = jnp.trace(jac, axis1=1, axis2=2)
        dxi = dzeta = None
    fx = v[:B]
    dlog = None if s.logdens is None else -div[:B]
    ds = SystemState(fx, dxi, v[B:], dzeta, dlog)

    if s.ys.shape[0] == 0:
        # pure transport (evaluation ensembles): no batch, no running cost
        return ds, jnp.zeros(B), 0
    E, n_clamp = conv_field(spec.kernel, s.x, s.ys, s.zetas)
    target = E - spec.stiffness * s.x
    if spec.nu > 0:
        target = target - spec.nu * s.xi
    g = jnp.sum((fx - target) ** 2, axis=-1)
    return ds, g, n_clamp


def _strip(s):
    return s._replace(logdens=None)


def adjoint_system(field, spec):
    """Scalar-cost system over the adjoint state (log-density dropped)."""

    def Fs(t, s, theta):
        ds, g, _ = system(field, spec, t, s, theta)
        return _strip(ds), jnp.mean(g)

    return Fs


# ---------------------------------------------------------------------------
# initial states


def _as_probes(x0, d):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[None]
    if x0.ndim != 2 or x0.shape[1] != d:
        raise ValueError(f"probes must be {d}-vectors")
    return x0


def initial_state(spec, x0, N, seed, scores=True, stream=0):
    """State at t = 0 with a fresh batch of ``N`` particles drawn from the initial law."""
    ref = spec.reference
    if N < 1:
        raise ValueError("batch size N must be >= 1")
    x0 = _as_probes(x0, spec.d)
    if not np.all(ref.in_support(0.0, x0)):
        raise ValueError("probe start outside the support of the initial density")
    ys = ref.sample(0.0, N, seed, stream=2 * stream + 1)
    logdens = jnp.asarray(ref.log_density(0.0, x0))
    if scores:
        xi, zetas = jnp.asarray(ref.score(0.0, x0)), jnp.asarray(ref.score(0.0, ys))
    else:
        xi = zetas = None
    return SystemState(jnp.asarray(x0), xi, jnp.asarray(ys), zetas, logdens)


def sample_probes(spec, count, seed, stream=0):
    return spec.reference.sample(0.0, count, seed, stream=2 * stream)


# ---------------------------------------------------------------------------
# trajectories


def theta_digest(theta):
    return hashlib.sha1(np.ascontiguousarray(np.asarray(theta, dtype=np.float64)).tobytes()).hexdigest()


@dataclass
class TrajectoryBatch:
    time_grid: np.ndarray
    states: SystemState  # stacked, leading axis = time node
    running_costs: np.ndarray  # (steps + 1, B)
    losses: np.ndarray  # (B,) RK4-integrated trajectory losses
    clamp_events: int
    theta_digest: str
    spec: ProblemSpec = field(repr=False)

    @property
    def steps(self):
        return len(self.time_grid) - 1

    @property
    def loss(self):
        """Mean trajectory-wise loss over the probe batch."""
        return float(np.mean(self.losses))

    def trapezoid_losses(self):
        h = self.time_grid[1] - self.time_grid[0]
        c = self.running_costs
        return h * (c.sum(axis=0) - 0.5 * (c[0] + c[-1]))

    def state_at(self, k):
        return jax.tree_util.tree_map(lambda a: a[k], self.states)


@lru_cache(maxsize=64)
def _forward_fn(field, spec, steps):
    def F(t, s, theta):
        return system(field, spec, t, s, theta)

    return jax.jit(lambda theta, s0: ode.forward(F, theta, s0, spec.T, steps))


def _check_finite(states, costs):
    bad = ~np.isfinite(np.asarray(costs))
    for leaf in jax.tree_util.tree_leaves(states):
        a = np.asarray(leaf)
        bad = bad | ~np.isfinite(a.reshape(a.shape[0], -1)).all(axis=1, keepdims=True)
    rows = np.nonzero(bad.any(axis=1))[0]
    if rows.size:
        raise PropagationError(f"non-finite state or cost first at time node {rows[0]}")


def integrate_forward(params, spec, s0, steps=100):
    """RK4 with fixed step ``T / steps``; running costs recorded at grid nodes."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    field_, theta = resolve(params)
    states, costs, losses, n_clamp = _forward_fn(field_, spec, int(steps))(theta, s0)
    _check_finite(states, costs)
    return TrajectoryBatch(
        time_grid=np.linspace(0.0, spec.T, steps + 1),
        states=states,
        running_costs=np.asarray(costs),
        losses=np.asarray(losses),
        clamp_events=int(n_clamp),
        theta_digest=theta_digest(theta),
        spec=spec,
    )


def transition(params, spec, t, s):
    field_, theta = resolve(params)
    ds, _, _ = system(field_, spec, float(t), s, theta)
    for leaf in jax.tree_util.tree_leaves(ds):
        if not np.all(np.isfinite(np.asarray(leaf))):
            raise PropagationError(f"non-finite transition at t={t}")
    return ds


def running_cost(params, spec, t, s):
    """Per-probe squared mismatch; a float for a single probe."""
    field_, theta = resolve(params)
    _, g, n = system(field_, spec, float(t), s, theta)
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        raise PropagationError(f"non-finite running cost at t={t}")
    return float(g[0]) if g.shape == (1,) else g


def dump_trajectories(traj, path):
    """CSV rows ``traj_id, t, x..., xi..., logdens, running_cost``."""
    st = traj.states
    x = np.asarray(st.x)
    M1, B, d = x.shape
    xi = None if st.xi is None else np.asarray(st.xi)
    ld = None if st.logdens is None else np.asarray(st.logdens)
    header = ["traj_id", "t"] + [f"x{i}" for i in range(d)]
    header += [f"xi{i}" for i in range(d)] + ["logdens", "running_cost"]
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for b in range(B):
            for k in range(M1):
                row = [b, repr(float(traj.time_grid[k]))] + [repr(float(v)) for v in x[k, b]]
                row += [repr(float(v)) for v in xi[k, b]] if xi is not None else [""] * d
                row += [repr(float(ld[k, b])) if ld is not None else ""]
                row += [repr(float(traj.running_costs[k, b]))]
                w.writerow(row)
    os.replace(tmp, path)
