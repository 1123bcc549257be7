"""Nested forward-mode dual numbers over a small primitive set.

A level-``n`` :class:`DualTower` carries ``2**n`` components indexed by
bitmasks over the nesting levels; component ``S`` is the mixed directional
derivative along the directions seeded at the levels in ``S``. Seeding every
level with the same direction gives higher-order directional derivatives,
distinct directions give mixed partials (used for the Jacobian and
``grad(div f)``).

Compositions are built from :class:`Affine`, :class:`Dense`, :class:`Tanh`,
:class:`Add`, :class:`Scale` and :class:`Product`. Components may be jax
arrays or tracers, so reverse-mode sensitivities of any derived quantity are
available through :func:`jax.vjp` (see :func:`param_vjp`).
"""

from __future__ import annotations

from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

MAX_LEVEL = 3


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [(first,)] + part
        for i in range(len(part)):
            yield part[:i] + [(first,) + part[i]] + part[i + 1 :]


@lru_cache(maxsize=None)
def _partitions(mask):
    bits = tuple(b for b in range(MAX_LEVEL) if mask >> b & 1)
    out = []
    for part in _set_partitions(list(bits)):
        out.append(tuple(sum(1 << b for b in block) for block in part))
    return tuple(out)


def _is_zero(c):
    return isinstance(c, float) and c == 0.0


def _mul(a, b):
    if _is_zero(a) or _is_zero(b):
        return 0.0
    return a * b


def _add(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return a + b


def _tanh_derivs(t, order):
    s = 1.0 - t * t
    out = [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)]
    return out[: order + 1]


class DualTower:
    """Nested dual number with ``2**level`` components.

    ``parts[0]`` is the value; ``parts[mask]`` the mixed derivative along the
    levels set in ``mask``. Exact zeros are stored as the float ``0.0`` and
    skipped in arithmetic.
    """

    __slots__ = ("level", "parts")

    def __init__(self, parts, level):
        if not 1 <= level <= MAX_LEVEL:
            raise ValueError(f"nesting level must be in 1..{MAX_LEVEL}, got {level}")
        if len(parts) != 1 << level:
            raise ValueError(f"level {level} needs {1 << level} components, got {len(parts)}")
        self.level = level
        self.parts = list(parts)

    @classmethod
    def seed(cls, point, directions):
        """Lift ``point`` with one direction per nesting level."""
        level = len(directions)
        parts = [0.0] * (1 << level)
        parts[0] = jnp.asarray(point, dtype=jnp.float64)
        for i, v in enumerate(directions):
            parts[1 << i] = jnp.asarray(v, dtype=jnp.float64)
        return cls(parts, level)

    @property
    def value(self):
        return self.parts[0]

    @property
    def top(self):
        return self.parts[-1]

    def _check(self, other):
        if isinstance(other, DualTower):
            if other.level != self.level:
                raise ValueError(
                    f"cannot mix nesting levels {self.level} and {other.level}"
                )
            return other
        return None

    def __add__(self, other):
        o = self._check(other)
        if o is None:
            parts = list(self.parts)
            parts[0] = parts[0] + other
            return DualTower(parts, self.level)
        return DualTower([_add(a, b) for a, b in zip(self.parts, o.parts)], self.level)

    __radd__ = __add__

    def __neg__(self):
        return DualTower([0.0 if _is_zero(p) else -p for p in self.parts], self.level)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._check(other)
        if o is None:
            return DualTower([_mul(p, other) for p in self.parts], self.level)
        n = 1 << self.level
        out = []
        for s in range(n):
            acc = 0.0
            sub = s
            while True:
                acc = _add(acc, _mul(self.parts[sub], o.parts[s ^ sub]))
                if sub == 0:
                    break
                sub = (sub - 1) & s
            out.append(acc)
        return DualTower(out, self.level)

    __rmul__ = __mul__

    def affine(self, weight, bias=None):
        """``x @ weight.T + bias`` applied to every component."""
        w_t = jnp.asarray(weight).T
        parts = [0.0 if _is_zero(p) else p @ w_t for p in self.parts]
        if bias is not None:
            parts[0] = parts[0] + bias
        return DualTower(parts, self.level)

    def apply_elementwise(self, derivs):
        """Faa di Bruno over set partitions; ``derivs[k]`` is f^(k) at the value."""
        out = [derivs[0]]
        for s in range(1, 1 << self.level):
            acc = 0.0
            for part in _partitions(s):
                term = derivs[len(part)]
                for block in part:
                    term = _mul(term, self.parts[block])
                acc = _add(acc, term)
            out.append(acc)
        return DualTower(out, self.level)

    def tanh(self):
        t = jnp.tanh(self.parts[0])
        return self.apply_elementwise(_tanh_derivs(t, self.level))

    def __repr__(self):
        return f"DualTower(level={self.level}, value={self.parts[0]!r})"


def _tanh(x):
    if isinstance(x, DualTower):
        return x.tanh()
    return jnp.tanh(x)


def _affine(x, weight, bias):
    if isinstance(x, DualTower):
        return x.affine(weight, bias)
    return x @ jnp.asarray(weight).T + bias


# ---------------------------------------------------------------------------
# primitives


class Primitive:
    """Base class of the supported building blocks."""

    n_params = 0

    def apply(self, theta, x):
        raise NotImplementedError

    def __call__(self, x, theta=None):
        return self.apply(theta, x)


def _check_children(*children):
    for c in children:
        if not isinstance(c, Primitive):
            raise TypeError(f"unsupported primitive {type(c).__name__}")


class Affine(Primitive):
    """Fixed affine map ``x -> W x + b``."""

    def __init__(self, weight, bias=None):
        self.weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
        out = self.weight.shape[0]
        self.bias = np.zeros(out) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (out,):
            raise ValueError("bias shape does not match weight rows")

    def apply(self, theta, x):
        return _affine(x, self.weight, self.bias)


class Dense(Primitive):
    """Affine map whose weights and bias are read from the parameter vector.

    Layout: row-major ``W`` of shape ``(n_out, n_in)`` followed by ``b``.
    """

    def __init__(self, n_in, n_out):
        if n_in < 1 or n_out < 1:
            raise ValueError("layer widths must be >= 1")
        self.n_in, self.n_out = n_in, n_out
        self.n_params = (n_in + 1) * n_out

    def apply(self, theta, x):
        k = self.n_in * self.n_out
        w = theta[:k].reshape(self.n_out, self.n_in)
        return _affine(x, w, theta[k : k + self.n_out])


class Tanh(Primitive):
    def apply(self, theta, x):
        return _tanh(x)


class Chain(Primitive):
    """Left-to-right composition ``layers[-1](...layers[0](x))``."""

    def __init__(self, *layers):
        if not layers:
            raise ValueError("empty chain")
        _check_children(*layers)
        self.layers = layers
        self.n_params = sum(l.n_params for l in layers)

    def apply(self, theta, x):
        off = 0
        for layer in self.layers:
            sub = None if theta is None else theta[off : off + layer.n_params]
            x = layer.apply(sub, x)
            off += layer.n_params
        return x


class _Binary(Primitive):
    def __init__(self, left, right):
        _check_children(left, right)
        self.left, self.right = left, right
        self.n_params = left.n_params + right.n_params

    def _both(self, theta, x):
        k = self.left.n_params
        lt = None if theta is None else theta[:k]
        rt = None if theta is None else theta[k:]
        return self.left.apply(lt, x), self.right.apply(rt, x)


class Add(_Binary):
    def apply(self, theta, x):
        a, b = self._both(theta, x)
        return a + b


class Product(_Binary):
    """Elementwise product of two branches."""

    def apply(self, theta, x):
        a, b = self._both(theta, x)
        if isinstance(b, DualTower) and not isinstance(a, DualTower):
            return b * a
        return a * b


class Scale(Primitive):
    def __init__(self, factor, inner):
        _check_children(inner)
        self.factor = float(factor)
        self.inner = inner
        self.n_params = inner.n_params

    def apply(self, theta, x):
        return self.inner.apply(theta, x) * self.factor


class Identity(Primitive):
    def apply(self, theta, x):
        return x


# ---------------------------------------------------------------------------
# derivative queries


def _as_composition(fn):
    if not isinstance(fn, Primitive):
        raise TypeError(
            f"unsupported primitive {type(fn).__name__}; build fn from the primitives in einn.autodiff"
        )
    return fn


def _vector(v, name):
    v = jnp.atleast_1d(jnp.asarray(v, dtype=jnp.float64))
    if v.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    return v


def directional_derivative(fn, point, direction, order, theta=None):
    """``d^order/deps^order fn(point + eps * direction)`` at ``eps = 0``."""
    fn = _as_composition(fn)
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2 or 3, got {order}")
    point = _vector(point, "point")
    direction = _vector(direction, "direction")
    if point.shape != direction.shape:
        raise ValueError("point and direction dimensions differ")
    out = fn.apply(theta, DualTower.seed(point, [direction] * order))
    if _is_zero(out.top):
        return jnp.zeros_like(out.value)
    return out.top


def jacobian(fn, point, theta=None):
    """Jacobian ``J[i, j] = d fn_i / d x_j`` from one batched first-order pass."""
    fn = _as_composition(fn)
    point = _vector(point, "point")
    d = point.shape[0]
    out = fn.apply(theta, DualTower.seed(point, [jnp.eye(d)]))
    m = out.value.shape[-1]
    if _is_zero(out.top):
        return jnp.zeros((m, d))
    return jnp.broadcast_to(out.top, (d, m)).T


def grad_divergence(fn, point, theta=None):
    """``grad(div fn)`` from one batched second-order pass over direction pairs."""
    fn = _as_composition(fn)
    point = _vector(point, "point")
    d = point.shape[0]
    eye = jnp.eye(d)
    tower = DualTower.seed(point, [eye[:, None, :], eye[None, :, :]])
    out = fn.apply(theta, tower)
    if out.value.shape[-1] != d:
        raise ValueError("grad_divergence needs fn: R^d -> R^d")
    top = out.top
    if _is_zero(top):
        return jnp.zeros(d)
    top = jnp.broadcast_to(top, (d, d, d))
    # top[j, k, i] = d_j d_k fn_i
    return jnp.einsum("jkj->k", top)


def param_vjp(fn, point, theta, covector):
    """``covector . d fn / d theta`` at ``(point, theta)``.

    ``fn`` is a parameterised composition, or any callable ``fn(point, theta)``
    built on the queries above (e.g. a directional derivative), in which case
    the sensitivity of that derived quantity is returned.
    """
    theta = jnp.asarray(theta, dtype=jnp.float64)
    if isinstance(fn, Primitive):
        if fn.n_params != theta.shape[0]:
            raise ValueError(f"expected {fn.n_params} parameters, got {theta.shape[0]}")
        call = lambda th: fn.apply(th, jnp.asarray(point, dtype=jnp.float64))
    else:
        call = lambda th: fn(point, th)
    out, pullback = jax.vjp(call, theta)
    covector = jnp.asarray(covector, dtype=jnp.float64)
    if covector.shape != jnp.shape(out):
        raise ValueError(f"covector shape {covector.shape} does not match output {jnp.shape(out)}")
    return pullback(covector)[0]
