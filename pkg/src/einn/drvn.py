"""Deep random vortex network baseline.

A drift network ``u(t, x)`` is trained to match the empirical convolution
field of the particle system it drives. Particles are treated as data at
every step: the loss is differentiated only through ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from .dynamics import resolve
from .kernels import COULOMB, ZERO, coulomb_force
from .reference import make_rng


@dataclass(frozen=True)
class SdeEnsemble:
    particles: np.ndarray  # (M, d)
    t: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")


class SimulationError(RuntimeError):
    pass


def biot_savart_force(z, eps):
    """Batched clamped Biot-Savart kernel; exact zeros give zero."""
    r2 = jnp.sum(z * z, axis=-1)
    zero = r2 == 0.0
    r = jnp.sqrt(jnp.where(zero, 1.0, r2))
    r_eff = jnp.maximum(r, eps)
    perp = jnp.stack([-z[..., 1], z[..., 0]], axis=-1)
    k = perp / (2.0 * np.pi * r * r_eff)[..., None]
    return jnp.where(zero[..., None], 0.0, k)


def self_excluded_field(kernel, X):
    """``(1/(M-1)) sum_{k != j} K(X_j - X_k)`` with the clamped singular kernel."""
    M = X.shape[0]
    if kernel.kind == ZERO:
        return jnp.zeros_like(X)
    diff = X[:, None, :] - X[None, :, :]
    if kernel.kind == COULOMB:
        k, _ = coulomb_force(diff, kernel.clamp_eps)
    else:
        k = biot_savart_force(diff, kernel.clamp_eps)
    k = k * (1.0 - jnp.eye(M))[..., None]
    return jnp.sum(k, axis=1) / (M - 1)


def sde_step(ensemble, params, spec, seed):
    """Euler-Maruyama with drift ``-grad V + u`` and noise ``sqrt(2 nu h)``."""
    if ensemble.step > 0.05:
        raise ValueError("step must be <= 0.05")
    field, theta = resolve(params)
    X = jnp.asarray(ensemble.particles)
    h = ensemble.step
    drift = field.value(theta, ensemble.t, X) - spec.stiffness * X
    noise = make_rng(seed, 11).standard_normal(X.shape)
    Xn = np.asarray(X + h * drift) + np.sqrt(2.0 * spec.nu * h) * noise
    if not np.all(np.isfinite(Xn)):
        raise SimulationError(f"non-finite particle at t={ensemble.t + h}")
    return SdeEnsemble(Xn, ensemble.t + h, h)


@lru_cache(maxsize=32)
def _loss_fn(field, spec, steps):
    h = spec.T / steps
    kernel = spec.kernel

    def loss(theta, X0, noise):
        def body(X, k):
            t = k * h
            target = jax.lax.stop_gradient(self_excluded_field(kernel, X))
            u = field.value(theta, t, X)
            term = jnp.mean(jnp.sum((u - target) ** 2, axis=-1))
            drift = jax.lax.stop_gradient(u) - spec.stiffness * X
            Xn = X + h * drift + jnp.sqrt(2.0 * spec.nu * h) * noise[k]
            return Xn, term

        X_end, terms = jax.lax.scan(body, X0, jnp.arange(steps))
        u_end = field.value(theta, spec.T, X_end)
        target = self_excluded_field(kernel, X_end)
        last = jnp.mean(jnp.sum((u_end - target) ** 2, axis=-1))
        terms = jnp.concatenate([terms, last[None]])
        # trapezoid on the SDE grid
        return h * (jnp.sum(terms) - 0.5 * (terms[0] + terms[-1])), X_end

    return jax.jit(jax.value_and_grad(loss, has_aux=True))


def _draws(spec, M, steps, seed, stream):
    X0 = spec.reference.sample(0.0, M, seed, stream=1000 + stream)
    noise = make_rng(seed, 12, stream).standard_normal((steps, M, spec.d))
    return jnp.asarray(X0), jnp.asarray(noise)


def drvn_loss_and_grad(params, spec, M, steps, seed, stream=0):
    if M < 2:
        raise ValueError("the self-excluded convolution needs at least two particles")
    field, theta = resolve(params)
    X0, noise = _draws(spec, M, steps, seed, stream)
    (loss, X_end), grad = _loss_fn(field, spec, int(steps))(theta, X0, noise)
    if not np.all(np.isfinite(np.asarray(X_end))):
        raise SimulationError("non-finite particle during the SDE simulation")
    return float(loss), np.asarray(grad)


def drvn_loss(params, spec, M=1024, steps=100, seed=0, stream=0):
    """Time-integrated squared gap between the drift and its empirical convolution field."""
    return drvn_loss_and_grad(params, spec, M, steps, seed, stream)[0]


def drvn_step_fn(params, spec, cfg, step_index):
    """Training step with the same signature as :func:`einn.training.loss_and_grad`."""
    loss, grad = drvn_loss_and_grad(params, spec, cfg.batch_N, cfg.steps, cfg.seed, step_index)
    return loss, grad, 0


def drift_field(params):
    """``(t, X) -> u(t, X)`` for evaluating the learned velocity directly."""
    field, theta = resolve(params)
    fn = jax.jit(lambda t, X: field.value(theta, t, X))
    return lambda t, X: np.asarray(fn(float(t), jnp.asarray(X)))
