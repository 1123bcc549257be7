"""Evaluation: relative l2 error of the convolution field, KL, modulated energy."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from .dynamics import SystemState, initial_state, integrate_forward, sample_probes
from .kernels import conv_field, sphere_area

KL_ESCAPE_PENALTY = 50.0
R_STREAM = 2**40  # above any training iteration, so the R(f) batch is never a training batch
_PAIR_CHUNK = 2_000_000

DEFAULT_BOX = {"lamb_oseen": (2.0, 41), "barenblatt": (0.1, 21), "ou": (1.0, 21)}


class MetricError(RuntimeError):
    pass


@dataclass
class ErrorCurve:
    times: np.ndarray
    values: np.ndarray
    domain_box: float  # half-width of the cube [-b, b]^d
    grid_per_axis: int
    skipped: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values differ in length")

    def as_dict(self):
        return {
            "times": self.times.tolist(), "values": self.values.tolist(),
            "domain_box": self.domain_box, "grid_per_axis": self.grid_per_axis,
            "skipped": self.skipped,
        }


def time_averaged_error(curve):
    """Trapezoidal time average of Q over the curve's time span."""
    if len(curve.values) == 0:
        raise ValueError("empty curve")
    if len(curve.values) == 1:
        return float(curve.values[0])
    span = curve.times[-1] - curve.times[0]
    return float(np.trapezoid(curve.values, curve.times) / span)


def grid_nodes(dim, box, per_axis):
    g = np.linspace(-box, box, per_axis)
    return np.stack(np.meshgrid(*[g] * dim, indexing="ij"), axis=-1).reshape(-1, dim)


@lru_cache(maxsize=None)
def _field_fn(kernel):
    return jax.jit(lambda X, Y, Z: conv_field(kernel, X, Y, Z)[0])


def empirical_field(kernel, nodes, particles, scores=None):
    """Chunked :func:`conv_field` at many nodes."""
    fn = _field_fn(kernel)
    Y = jnp.asarray(particles)
    Z = None if scores is None else jnp.asarray(scores)
    chunk = max(1, _PAIR_CHUNK // max(1, len(particles)))
    out = [np.asarray(fn(jnp.asarray(nodes[i : i + chunk]), Y, Z)) for i in range(0, len(nodes), chunk)]
    return np.concatenate(out, axis=0)


def ratio_error(estimate, truth, floor=1e-12):
    """Mean over nodes of ``|estimate - truth| / |truth|``; returns ``(Q, skipped)``."""
    nt = np.linalg.norm(truth, axis=-1)
    keep = nt >= floor
    if not keep.any():
        raise MetricError("every grid node has a vanishing reference field")
    err = np.linalg.norm(estimate - truth, axis=-1)
    return float(np.mean(err[keep] / nt[keep])), int((~keep).sum())


def evolve_particles(params, spec, X0, steps, scores=None, logdens=False):
    """Push ``X0`` through the hypothesis flow; no convolution batch."""
    ref = spec.reference
    X0 = np.asarray(X0, dtype=np.float64)
    scores = spec.needs_scores if scores is None else scores
    empty = jnp.zeros((0, spec.d))
    s0 = SystemState(
        x=jnp.asarray(X0),
        xi=jnp.asarray(ref.score(0.0, X0)) if scores else None,
        ys=empty,
        zetas=empty if scores else None,
        logdens=jnp.asarray(ref.log_density(0.0, X0)) if logdens else None,
    )
    return integrate_forward(params, spec, s0, steps)


def _node_indices(traj, times):
    idx = []
    for t in times:
        k = np.flatnonzero(np.isclose(traj.time_grid, t, rtol=0.0, atol=1e-9))
        if k.size != 1:
            raise ValueError(f"time {t} is not on the integration grid")
        idx.append(int(k[0]))
    return idx


def error_curve(params, spec, times, domain_box=None, grid_per_axis=None, batch_N=16384, seed=0, steps=100):
    """Q(t) at the requested grid times from one hypothesis particle ensemble."""
    box0, grid0 = DEFAULT_BOX.get(spec.reference.name, (1.0, 21))
    box = box0 if domain_box is None else domain_box
    per_axis = grid0 if grid_per_axis is None else grid_per_axis
    nodes = grid_nodes(spec.d, box, per_axis)
    # Sobol quadrature of the initial law: i.i.d. draws leave a noise floor
    # above the signal near the origin for the 3D Coulomb field
    X0 = spec.reference.quadrature(0.0, batch_N, seed)
    traj = evolve_particles(params, spec, X0, steps)
    values, skipped = [], 0
    for t, k in zip(times, _node_indices(traj, times)):
        st = traj.state_at(k)
        est = empirical_field(spec.kernel, nodes, np.asarray(st.x), None if st.xi is None else np.asarray(st.xi))
        q, sk = ratio_error(est, spec.reference.convolution(t, nodes))
        values.append(q)
        skipped = max(skipped, sk)
    return ErrorCurve(np.asarray(times, dtype=np.float64), np.asarray(values), box, per_axis, skipped)


def relative_l2_error(params, spec, t, domain_box=None, grid_per_axis=None, batch_N=16384, seed=0, steps=100):
    """Q(t) for a single time on the integration grid."""
    return float(error_curve(params, spec, [t], domain_box, grid_per_axis, batch_N, seed, steps).values[0])


def field_error_curve(field_fn, spec, times, domain_box=None, grid_per_axis=None):
    """Q(t) for a model that outputs the convolution field directly, ``field_fn(t, nodes)``."""
    box0, grid0 = DEFAULT_BOX.get(spec.reference.name, (1.0, 21))
    box = box0 if domain_box is None else domain_box
    per_axis = grid0 if grid_per_axis is None else grid_per_axis
    nodes = grid_nodes(spec.d, box, per_axis)
    values, skipped = [], 0
    for t in times:
        q, sk = ratio_error(np.asarray(field_fn(t, nodes)), spec.reference.convolution(t, nodes))
        values.append(q)
        skipped = max(skipped, sk)
    return ErrorCurve(np.asarray(times, dtype=np.float64), np.asarray(values), box, per_axis, skipped)


@dataclass
class KLCurve:
    times: np.ndarray
    values: np.ndarray
    escaped: np.ndarray
    count: int
    particles: list = field(default=None, repr=False)  # positions at each time, when kept

    @property
    def noise_band(self):
        return 4.0 / np.sqrt(self.count)

    def as_dict(self):
        return {"times": self.times.tolist(), "values": self.values.tolist(),
                "escaped": self.escaped.tolist(), "count": self.count}


def kl_curve(params, spec, times, traj_count=2048, seed=0, steps=100, keep_particles=False):
    """Plug-in estimate of KL(rho_f || rho_ref) along hypothesis trajectories."""
    ref = spec.reference
    X0 = ref.sample(0.0, traj_count, seed, stream=98)
    traj = evolve_particles(params, spec, X0, steps, scores=False, logdens=True)
    vals, esc, kept = [], [], []
    for t, k in zip(times, _node_indices(traj, times)):
        st = traj.state_at(k)
        x = np.asarray(st.x)
        kept.append(x)
        log_ref = ref.log_density(t, x)
        out = ~np.isfinite(log_ref)
        terms = np.where(out, KL_ESCAPE_PENALTY, np.asarray(st.logdens) - np.where(out, 0.0, log_ref))
        vals.append(float(np.mean(terms)))
        esc.append(int(out.sum()))
    return KLCurve(np.asarray(times, dtype=np.float64), np.asarray(vals), np.asarray(esc), traj_count,
                   kept if keep_particles else None)


def self_consistency(params, spec, probes=64, batch_N=1024, seed=0, steps=20):
    """R(f): the training loss of ``params`` on one fixed batch of probes and particles.

    The batch depends only on ``seed``, so values at different checkpoints are comparable.
    """
    x0 = sample_probes(spec, probes, seed, stream=R_STREAM)
    s0 = initial_state(spec, x0, batch_N, seed, scores=spec.needs_scores, stream=R_STREAM)
    return integrate_forward(params, spec, s0, steps).loss


def kl_estimate(params, spec, t, traj_count=2048, seed=0, steps=100):
    return float(kl_curve(params, spec, [t], traj_count, seed, steps).values[0])


def _pair_mean(a, b, d):
    """Mean of the Coulomb potential over pairs with ``a_i != b_j``."""
    total, count = 0.0, 0
    chunk = max(1, _PAIR_CHUNK // max(1, len(b)))
    for i in range(0, len(a), chunk):
        diff = a[i : i + chunk, None, :] - b[None, :, :]
        r = np.sqrt(np.sum(diff * diff, axis=-1))
        keep = r > 0
        rs = np.where(keep, r, 1.0)
        if d == 2:
            g = -np.log(rs) / (2.0 * np.pi)
        else:
            g = rs ** (2 - d) / ((d - 2) * sphere_area(d))
        total += float(np.sum(np.where(keep, g, 0.0)))
        count += int(keep.sum())
    return total / count


def modulated_energy(samples_a, ref, t, quad_count=4096, seed=0, reference_samples=None):
    """Empirical modulated Coulomb energy between a particle set and ``ref`` at time ``t``.

    Coincident pairs are excluded and each double sum is normalised by the
    number of pairs it keeps.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = ref.sample(t, quad_count, seed, stream=97) if reference_samples is None else np.asarray(reference_samples)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("modulated energy needs at least two samples on each side")
    d = a.shape[1]
    return 0.5 * (_pair_mean(a, a, d) - 2.0 * _pair_mean(a, b, d) + _pair_mean(b, b, d))
