"""Finite-difference checks of the adjoint gradient."""

from __future__ import annotations

import time
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from . import ode
from .adjoint import gradient
from .dynamics import initial_state, integrate_forward, make_problem, sample_probes
from .net import init_params
from .reference import make_rng

FD_STEP = 1e-5
TOLERANCE = 1e-4
# problem, kernel family label
FAMILIES = (("barenblatt", "coulomb d=3"), ("lamb_oseen", "biot-savart d=2"), ("ou", "zero kernel"))


def scalar_benchmark(steps=100):
    """Gradient of ``int_0^1 s^2 dt`` for ``s' = theta s``, ``s(0) = 1`` at ``theta = 0``.

    The loss is ``(exp(2 theta) - 1) / (2 theta)``, so the exact derivative is 1.
    """
    F = lambda t, s, th: (th[0] * s, jnp.sum(s * s), 0)
    Fs = lambda t, s, th: (th[0] * s, jnp.sum(s * s))
    theta = jnp.zeros(1)
    states, _, _, _ = ode.forward(F, theta, jnp.ones(1), 1.0, steps)
    grad, _ = ode.backward(Fs, theta, states, 1.0, steps)
    return float(grad[0])


@dataclass
class CheckResult:
    family: str
    seed: int
    n_params: int
    max_rel_error: float
    loss: float

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE


def relative_errors(g, fd):
    """Coordinate-wise ``|g - fd| / |fd|``; denominators floored at 1e-6 of the largest entry
    so coordinates whose derivative vanishes do not divide by rounding noise."""
    scale = np.maximum(np.abs(fd), 1e-6 * np.abs(fd).max())
    return np.abs(g - fd) / scale


def check_config(problem, seed, hidden=4, probes=2, batch=8, steps=100, h=FD_STEP):
    spec = make_problem(problem)
    rng = make_rng(seed, 21)
    p = init_params((spec.d + 1, hidden, spec.d), seed)
    p = p.replace(p.theta + 0.3 * rng.standard_normal(p.theta.size))
    x0 = sample_probes(spec, probes, seed, stream=5)
    s0 = initial_state(spec, x0, batch, seed, scores=spec.needs_scores, stream=5)
    traj = integrate_forward(p, spec, s0, steps)
    g = gradient(p, spec, traj)

    def loss(th):
        return integrate_forward(p.replace(th), spec, s0, steps).loss

    fd = np.empty_like(g)
    for i in range(g.size):
        e = np.zeros_like(p.theta)
        e[i] = h
        fd[i] = (loss(p.theta + e) - loss(p.theta - e)) / (2 * h)
    return CheckResult(problem, seed, g.size, float(relative_errors(g, fd).max()), traj.loss)


def run_suite(per_family=7, seed=0, log=print):
    """Scalar benchmark plus ``per_family`` random tiny-net configurations per kernel family."""
    start = time.perf_counter()
    bench = scalar_benchmark()
    ok = abs(bench - 1.0) <= 1e-6
    log(f"scalar benchmark: dl/dtheta = {bench:.12f} ({'ok' if ok else 'FAIL'})")
    results = []
    for problem, label in FAMILIES:
        for k in range(per_family):
            r = check_config(problem, seed * 1000 + k)
            results.append(r)
            log(f"{label:16s} seed {r.seed:4d}  params {r.n_params:3d}  max rel err {r.max_rel_error:.2e}"
                f"  {'ok' if r.passed else 'FAIL'}")
    elapsed = time.perf_counter() - start
    log(f"{len(results)} configurations in {elapsed:.1f}s")
    return bench, results, elapsed
