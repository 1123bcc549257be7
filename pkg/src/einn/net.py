"""Velocity network f(t, x; theta) and analytic velocity fields.

Both kinds of field expose ``value(theta, t, X)`` and
``derivatives(theta, t, X)`` over a batch of points ``X`` of shape
``(M, d)``. The network derivatives come from the nested duals in
:mod:`einn.autodiff`; analytic fields (used to inject reference velocities)
use jax forward mode.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .autodiff import Chain, Dense, DualTower, Tanh, _is_zero

CHECKPOINT_MAGIC = "einn-checkpoint 1"


def param_count(arch):
    return sum((a + 1) * b for a, b in zip(arch[:-1], arch[1:]))


@dataclass(frozen=True)
class NetParams:
    """Flat parameter vector and layer widths ``(d + 1, hidden..., d)``."""

    theta: np.ndarray
    arch: tuple

    def __post_init__(self):
        arch = tuple(int(a) for a in self.arch)
        if len(arch) < 2:
            raise ValueError("arch needs at least an input and an output width")
        if arch[0] != arch[-1] + 1:
            raise ValueError(f"input width must be output width + 1 (time input), got {arch}")
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (param_count(arch),):
            raise ValueError(f"theta length {theta.shape} does not match arch {arch}")
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self):
        return self.arch[-1]

    def replace(self, theta):
        return NetParams(np.asarray(theta, dtype=np.float64), self.arch)


def mlp_arch(dim, hidden=(20,) * 7):
    return (dim + 1, *hidden, dim)


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 2 or min(arch) < 1:
        raise ValueError(f"invalid arch {arch}")
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-lim, lim, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return NetParams(np.concatenate(chunks), arch)


def build_mlp(arch):
    layers = []
    for i, (n_in, n_out) in enumerate(zip(arch[:-1], arch[1:])):
        layers.append(Dense(n_in, n_out))
        if i < len(arch) - 2:
            layers.append(Tanh())
    return Chain(*layers)


@dataclass(frozen=True)
class NetEval:
    value: np.ndarray
    jac: np.ndarray
    div: float
    grad_div: np.ndarray


class NetField:
    """The tanh MLP acting on ``[t, x]``."""

    def __init__(self, arch):
        self.arch = tuple(arch)
        self.dim = self.arch[-1]
        self.net = build_mlp(self.arch)

    def _inputs(self, t, X):
        tt = jnp.broadcast_to(jnp.asarray(t, dtype=jnp.float64), X.shape[:-1] + (1,))
        return jnp.concatenate([tt, X], axis=-1)

    def value(self, theta, t, X):
        return self.net.apply(theta, self._inputs(t, X))

    def jacobian(self, theta, t, X):
        """Values and Jacobians ``J[m, i, j] = d f_i / d x_j``."""
        d = self.dim
        z = self._inputs(t, X)
        e = jnp.eye(d + 1)[1:]  # spatial directions only
        out = self.net.apply(theta, DualTower.seed(z, [e[:, None, :]]))
        jac = jnp.broadcast_to(out.parts[1], (d,) + out.value.shape)
        return out.value, jnp.transpose(jac, (1, 2, 0))

    def derivatives(self, theta, t, X):
        """``(value, jac, div, grad_div)`` from one level-2 pass over direction pairs."""
        d = self.dim
        M = X.shape[0]
        z = self._inputs(t, X)
        e = jnp.eye(d + 1)[1:]
        tower = DualTower.seed(z, [e[:, None, None, :], e[None, :, None, :]])
        out = self.net.apply(theta, tower)
        value = out.value
        first = jnp.broadcast_to(out.parts[1], (d, 1, M, d))[:, 0]
        jac = jnp.transpose(first, (1, 2, 0))
        if _is_zero(out.parts[3]):
            gd = jnp.zeros((M, d))
        else:
            second = jnp.broadcast_to(out.parts[3], (d, d, M, d))
            # second[j, k, m, i] = d_j d_k f_i
            gd = jnp.einsum("jkmj->mk", second)
        div = jnp.trace(jac, axis1=1, axis2=2)
        return value, jac, div, gd


class AnalyticField:
    """Wrap a single-point jax function ``fn(t, x) -> velocity`` as a field."""

    def __init__(self, fn: Callable, dim: int, name: str = "analytic"):
        self.fn = fn
        self.dim = dim
        self.name = name
        self._jac = jax.jacfwd(fn, argnums=1)

        def div(t, x):
            return jnp.trace(self._jac(t, x))

        self._grad_div = jax.jacfwd(div, argnums=1)

    def value(self, theta, t, X):
        return jax.vmap(lambda x: self.fn(t, x))(X)

    def jacobian(self, theta, t, X):
        return self.value(theta, t, X), jax.vmap(lambda x: self._jac(t, x))(X)

    def derivatives(self, theta, t, X):
        value, jac = self.jacobian(theta, t, X)
        gd = jax.vmap(lambda x: self._grad_div(t, x))(X)
        return value, jac, jnp.trace(jac, axis1=1, axis2=2), gd


def field_and_theta(obj):
    """Resolve a NetParams or an AnalyticField into ``(field, theta)``."""
    if isinstance(obj, NetParams):
        return NetField(obj.arch), jnp.asarray(obj.theta)
    if isinstance(obj, AnalyticField):
        return obj, jnp.zeros(0)
    raise TypeError(f"expected NetParams or AnalyticField, got {type(obj).__name__}")


def _check_point(t, x):
    x = np.asarray(x, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.isfinite(t)):
        raise ValueError("non-finite network input")
    return x


def eval_full(params, t, x):
    x = _check_point(t, x)
    field, theta = field_and_theta(params)
    if x.shape != (field.dim,):
        raise ValueError(f"expected a {field.dim}-vector, got shape {x.shape}")
    v, j, dv, gd = field.derivatives(theta, float(t), jnp.asarray(x)[None])
    return NetEval(np.asarray(v[0]), np.asarray(j[0]), float(dv[0]), np.asarray(gd[0]))


def score_rhs_batch(value_jac_gd, xi):
    """``-grad(div f) - J^T xi`` for batched derivative outputs."""
    _, jac, _, gd = value_jac_gd
    return -gd - jnp.einsum("mij,mi->mj", jac, xi)


def score_rhs(params, t, x, xi):
    """Time derivative of the score along a trajectory of ``f``."""
    ev = eval_full(params, t, x)
    xi = np.asarray(xi, dtype=np.float64)
    return -ev.grad_div - ev.jac.T @ xi


# ---------------------------------------------------------------------------
# checkpoints
#
# Text file: magic line, ``arch`` line with the layer widths, then one
# parameter per line in %.17g (exact round trip of 64-bit floats).


def _atomic_write(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params, path):
    lines = [CHECKPOINT_MAGIC, "arch " + " ".join(str(a) for a in params.arch)]
    lines += ["%.17g" % v for v in params.theta]
    _atomic_write(path, "\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an einn checkpoint")
    head = lines[1].split()
    if head[0] != "arch":
        raise ValueError(f"{path}: missing arch line")
    arch = tuple(int(a) for a in head[1:])
    theta = np.array([float(v) for v in lines[2:] if v.strip()])
    return NetParams(theta, arch)
