"""Closed-form reference solutions: density, score, velocity and samplers.

Each reference implements single-point jax functions (``_log_density``,
``_score``, ``_velocity``) that are vectorised by the public methods and can
be wrapped as an analytic velocity field for oracle runs.
"""

from __future__ import annotations

import math
import warnings

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .kernels import BIOT_SAVART, COULOMB, ZERO


class OutOfSupportError(ValueError):
    pass


def make_rng(seed, *stream):
    """Counter-based generator; ``stream`` keys give independent substreams."""
    key = [int(seed) & (2**64 - 1)] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(key=np.random.SeedSequence(key).generate_state(2, np.uint64)))


class Reference:
    name = "reference"
    dim = 0
    nu = 0.0
    kernel_kind = ZERO
    stiffness = 0.0  # quadratic exterior potential V = stiffness |x|^2 / 2

    def _key(self):
        return (type(self).__name__, tuple(sorted(vars(self).items())))

    def __eq__(self, other):
        return isinstance(other, Reference) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in sorted(vars(self).items()))
        return f"{type(self).__name__}({args})"

    # --- single-point jax implementations -------------------------------
    def _log_density(self, t, x):
        raise NotImplementedError

    def _score(self, t, x):
        raise NotImplementedError

    def _velocity(self, t, x):
        raise NotImplementedError

    def _conv(self, t, x):
        """Closed-form ``K * rho_t``."""
        return jnp.zeros_like(x)

    def in_support(self, t, X):
        return np.ones(np.shape(X)[0], dtype=bool)

    # --- public vectorised API ----------------------------------------
    def _points(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[-1] != self.dim:
            raise ValueError(f"{self.name}: expected {self.dim}-vectors")
        return X, single

    def _map(self, fn, t, x):
        X, single = self._points(x)
        out = np.asarray(jax.vmap(lambda p: fn(float(t), p))(jnp.asarray(X)))
        return out[0] if single else out

    def density(self, t, x):
        return np.exp(self._map(self._log_density, t, x))

    def log_density(self, t, x):
        return self._map(self._log_density, t, x)

    def _require_support(self, t, x):
        X, _ = self._points(x)
        if not np.all(self.in_support(t, X)):
            raise OutOfSupportError(f"{self.name}: point outside the support interior")

    def score(self, t, x):
        self._require_support(t, x)
        return self._map(self._score, t, x)

    def underlying_velocity(self, t, x):
        self._require_support(t, x)
        return self._map(self._velocity, t, x)

    def convolution(self, t, x):
        return self._map(self._conv, t, x)

    def sample(self, t, count, seed, stream=0):
        raise NotImplementedError

    def _from_unit(self, t, u):
        raise NotImplementedError

    def quadrature(self, t, count, seed=0):
        """Low-discrepancy points of the law at ``t`` (scrambled Sobol, transformed).

        Not i.i.d.; used where a deterministic quadrature of the reference law
        beats plain Monte Carlo, e.g. for evaluation ensembles.
        """
        engine = qmc.Sobol(self.dim, scramble=True, seed=int(make_rng(seed, 4).integers(2**62)))
        with warnings.catch_warnings():
            # balance is best at powers of two but any count is a valid quadrature
            warnings.simplefilter("ignore", UserWarning)
            u = engine.random(count)
        # keep the inverse transforms away from 0 and 1
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        return self._from_unit(t, u)

    def velocity_fn(self):
        """Single-point jax function ``(t, x) -> velocity`` for oracle runs."""
        return self._velocity


class LambOseen(Reference):
    """Gaussian vorticity of variance ``2 nu (t + t0)`` per coordinate."""

    name = "lamb_oseen"
    dim = 2
    kernel_kind = BIOT_SAVART

    def __init__(self, nu=0.1, t0=0.1):
        if not nu > 0:
            raise ValueError("Lamb-Oseen needs nu > 0")
        self.nu = float(nu)
        self.t0 = float(t0)

    def variance(self, t):
        return 2.0 * self.nu * (t + self.t0)

    def _log_density(self, t, x):
        s2 = self.variance(t)
        return -jnp.sum(x * x) / (2.0 * s2) - jnp.log(2.0 * math.pi * s2)

    def _score(self, t, x):
        return -x / self.variance(t)

    def _conv(self, t, x):
        # u_t(x) = v(x / s) / s with v(z) = z_perp (1 - exp(-|z|^2/4)) / (2 pi |z|^2)
        s2 = self.nu * (t + self.t0)
        r2 = jnp.sum(x * x) / s2
        small = r2 < 1e-6
        r2s = jnp.where(small, 1.0, r2)
        ratio = jnp.where(small, 0.25 - r2 / 32.0 + r2 * r2 / 384.0, -jnp.expm1(-r2s / 4.0) / r2s)
        perp = jnp.stack([-x[1], x[0]])
        return perp * ratio / (2.0 * math.pi * s2)

    def _velocity(self, t, x):
        return self._conv(t, x) - self.nu * self._score(t, x)

    def sample(self, t, count, seed, stream=0):
        rng = make_rng(seed, 1, stream)
        return rng.standard_normal((count, 2)) * math.sqrt(self.variance(t))

    def _from_unit(self, t, u):
        return ndtri(u) * math.sqrt(self.variance(t))


class Barenblatt(Reference):
    """Expanding uniform ball, 3D Coulomb interaction, no diffusion."""

    name = "barenblatt"
    dim = 3
    kernel_kind = COULOMB
    boundary_margin = 1e-9

    def __init__(self, t0=0.1):
        if not t0 > 0:
            raise ValueError("Barenblatt needs t0 > 0")
        self.t0 = float(t0)

    def radius(self, t):
        return (3.0 * (t + self.t0) / (4.0 * math.pi)) ** (1.0 / 3.0)

    def in_support(self, t, X):
        return np.linalg.norm(np.atleast_2d(X), axis=-1) < self.radius(t) - self.boundary_margin

    def _log_density(self, t, x):
        inside = jnp.sum(x * x) <= self.radius(t) ** 2
        return jnp.where(inside, -jnp.log(t + self.t0), -jnp.inf)

    def _score(self, t, x):
        return jnp.zeros_like(x)

    def potential(self, t, x):
        """Solution of ``Laplace(psi) = -rho_t`` decaying at infinity."""
        x = np.asarray(x, dtype=np.float64)
        r = np.linalg.norm(x, axis=-1)
        R = self.radius(t)
        inner = (2.0 * R**2 - r**2) / (6.0 * (t + self.t0))
        outer = 1.0 / (8.0 * math.pi * np.where(r > 0, r, 1.0))
        return np.where(r <= R, inner, outer)

    def _conv(self, t, x):
        r2 = jnp.sum(x * x)
        R = self.radius(t)
        outside = r2 > R * R
        r3 = jnp.where(outside, r2, 1.0) ** 1.5
        return jnp.where(outside, x / (4.0 * math.pi * r3), x / (3.0 * (t + self.t0)))

    def _velocity(self, t, x):
        return self._conv(t, x)

    def sample(self, t, count, seed, stream=0):
        rng = make_rng(seed, 2, stream)
        g = rng.standard_normal((count, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        u = rng.uniform(size=count)
        r = self.radius(t) * u ** (1.0 / 3.0)
        r = np.minimum(r, self.radius(t) - 2 * self.boundary_margin)
        return g * r[:, None]

    def _from_unit(self, t, u):
        r = self.radius(t) * u[:, 0] ** (1.0 / 3.0)
        r = np.minimum(r, self.radius(t) - 2 * self.boundary_margin)
        c = 1.0 - 2.0 * u[:, 1]
        s = np.sqrt(np.maximum(0.0, 1.0 - c * c))
        phi = 2.0 * math.pi * u[:, 2]
        return np.stack([r * s * np.cos(phi), r * s * np.sin(phi), r * c], axis=-1)


class OrnsteinUhlenbeck(Reference):
    """No interaction, quadratic potential, Gaussian initial law.

    Per-coordinate variance ``nu/k + (var0 - nu/k) exp(-2 k t)``.
    """

    name = "ou"
    kernel_kind = ZERO

    def __init__(self, nu=0.1, stiffness=1.0, var0=0.5, dim=2):
        self.nu = float(nu)
        self.stiffness = float(stiffness)
        self.var0 = float(var0)
        self.dim = int(dim)

    def variance(self, t):
        k = self.stiffness
        inf = self.nu / k
        return inf + (self.var0 - inf) * jnp.exp(-2.0 * k * t)

    def _log_density(self, t, x):
        s2 = self.variance(t)
        return -jnp.sum(x * x) / (2.0 * s2) - 0.5 * self.dim * jnp.log(2.0 * math.pi * s2)

    def _score(self, t, x):
        return -x / self.variance(t)

    def _velocity(self, t, x):
        return -self.stiffness * x - self.nu * self._score(t, x)

    def sample(self, t, count, seed, stream=0):
        rng = make_rng(seed, 3, stream)
        return rng.standard_normal((count, self.dim)) * math.sqrt(float(self.variance(t)))

    def _from_unit(self, t, u):
        return ndtri(u) * math.sqrt(float(self.variance(t)))


def make_reference(problem, **kw):
    table = {"lamb_oseen": LambOseen, "barenblatt": Barenblatt, "ou": OrnsteinUhlenbeck}
    if problem not in table:
        raise ValueError(f"unknown problem {problem!r}")
    return table[problem](**kw)
