"""Differentiable computation substrate.

Reverse-mode automatic differentiation over float64 numpy arrays, built for
small training graphs: every forward operation records a node with a backward
closure, and a scalar loss is differentiated by one topological sweep.

All math helpers in this module (``exp``, ``matmul``, ``logsumexp``, ...)
dispatch on the argument type: applied to a :class:`Var` they extend the
graph, applied to a plain ndarray they compute with numpy directly. Model
code written against these helpers therefore runs both as a differentiable
training pass and as a cheap inference pass.

Randomness goes through :class:`SeededRng` (numpy PCG64), so identical seeds
reproduce identical streams across platforms and runs.

Graphs, parameter stores, and optimizer state are not thread-safe; mutate a
model instance from one thread only. Value-mode forwards over plain arrays
are pure and may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit
from scipy.special import logsumexp as _np_logsumexp

from .errors import NumericsError, ValidationError

Array = np.ndarray

SIGMA_FLOOR = 1e-6


def _check_finite(value: Array, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericsError(f"non-finite output of operation '{op}'")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One node of the computation graph: a float64 array plus backward rule."""

    __slots__ = ("value", "grad", "_parents", "_backward", "op")

    def __init__(self, value, parents=(), backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        _check_finite(self.value, op)
        self.grad: Array | None = None
        self._parents: tuple[Var, ...] = parents
        self._backward: Callable[[Array], None] | None = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from this scalar node, accumulating leaf gradients."""
        if self.value.size != 1:
            raise ValidationError("backward() requires a scalar node")
        order: list[Var] = []
        visited: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out = Var(self.value[key], (self,), None, "index")

        def bw(g, self=self, key=key, out=out):
            full = np.zeros_like(self.value)
            np.add.at(full, key, g)
            self._accum(full)

        out._backward = bw
        return out

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, op="constant")


def value_of(x) -> Array:
    """Plain ndarray view of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


# -- elementwise binary ops ----------------------------------------------


def add(a, b):
    if not _is_var(a, b):
        return np.add(a, b)
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b), None, "add")

    def bw(g):
        a._accum(_unbroadcast(g, a.value.shape))
        b._accum(_unbroadcast(g, b.value.shape))

    out._backward = bw
    return out


def mul(a, b):
    if not _is_var(a, b):
        return np.multiply(a, b)
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value, (a, b), None, "mul")

    def bw(g):
        a._accum(_unbroadcast(g * b.value, a.value.shape))
        b._accum(_unbroadcast(g * a.value, b.value.shape))

    out._backward = bw
    return out


def div(a, b):
    if not _is_var(a, b):
        return np.divide(a, b)
    a, b = as_var(a), as_var(b)
    with np.errstate(all="ignore"):
        out = Var(a.value / b.value, (a, b), None, "div")

    def bw(g):
        a._accum(_unbroadcast(g / b.value, a.value.shape))
        b._accum(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward = bw
    return out


def power(a, p: float):
    if not _is_var(a):
        return np.power(a, p)
    out = Var(a.value**p, (a,), None, "pow")

    def bw(g):
        a._accum(g * p * a.value ** (p - 1))

    out._backward = bw
    return out


def matmul(a, b):
    if not _is_var(a, b):
        return np.matmul(a, b)
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = Var(av @ bv, (a, b), None, "matmul")

    def bw(g):
        if av.ndim == 2 and bv.ndim == 2:
            a._accum(g @ bv.T)
            b._accum(av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            a._accum(bv @ g)
            b._accum(np.outer(av, g))
        elif av.ndim == 2 and bv.ndim == 1:
            a._accum(np.outer(g, bv))
            b._accum(av.T @ g)
        elif av.ndim == 1 and bv.ndim == 1:
            a._accum(g * bv)
            b._accum(g * av)
        else:  # pragma: no cover - shapes outside the substrate contract
            raise ValidationError("matmul supports 1-D/2-D operands only")

    out._backward = bw
    return out


def dot(a, b):
    return sum_(mul(a, b))


# -- elementwise unary ops -------------------------------------------------


def _unary(a, fn, dfn, op):
    if not _is_var(a):
        return fn(np.asarray(a, dtype=np.float64))
    with np.errstate(all="ignore"):
        out = Var(fn(a.value), (a,), None, op)

    def bw(g):
        a._accum(g * dfn(a.value, out.value))

    out._backward = bw
    return out


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def sinh(a):
    return _unary(a, np.sinh, lambda x, y: np.cosh(x), "sinh")


def cosh(a):
    return _unary(a, np.cosh, lambda x, y: np.sinh(x), "cosh")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: expit(x), "softplus")


def _sinhc_value(t: Array) -> Array:
    t = np.asarray(t, dtype=np.float64)
    small = np.abs(t) < 1e-3
    ts = np.where(small, 0.0, t)
    t2 = t * t
    series = 1.0 + t2 / 6.0 + t2 * t2 / 120.0 + t2 * t2 * t2 / 5040.0
    with np.errstate(invalid="ignore"):
        direct = np.where(small, 1.0, np.sinh(ts) / np.where(small, 1.0, ts))
    return np.where(small, series, direct)


def _sinhc_deriv(t: Array) -> Array:
    t = np.asarray(t, dtype=np.float64)
    small = np.abs(t) < 1e-3
    ts = np.where(small, 1.0, t)
    series = t / 3.0 + t**3 / 30.0 + t**5 / 840.0
    direct = (ts * np.cosh(ts) - np.sinh(ts)) / (ts * ts)
    return np.where(small, series, direct)


def sinhc(a):
    """sinh(t)/t with its removable singularity at t = 0 handled by series."""
    return _unary(a, _sinhc_value, lambda x, y: _sinhc_deriv(x), "sinhc")


def _acoshc_value(b: Array) -> Array:
    b = np.asarray(b, dtype=np.float64)
    u = b - 1.0
    small = u < 1e-5
    series = 1.0 - u / 3.0 + 2.0 * u * u / 15.0
    bs = np.where(small, 2.0, b)
    with np.errstate(invalid="ignore"):
        direct = np.arccosh(bs) / np.sqrt(bs * bs - 1.0)
    return np.where(small, series, direct)


def _acoshc_deriv(b: Array) -> Array:
    b = np.asarray(b, dtype=np.float64)
    u = b - 1.0
    small = u < 1e-5
    series = -1.0 / 3.0 + 4.0 * u / 15.0
    bs = np.where(small, 2.0, b)
    s = bs * bs - 1.0
    direct = 1.0 / s - bs * np.arccosh(bs) / s**1.5
    return np.where(small, series, direct)


def acoshc(a):
    """acosh(b)/sqrt(b^2 - 1) for b >= 1, series-stabilized near b = 1."""
    return _unary(a, _acoshc_value, lambda x, y: _acoshc_deriv(x), "acoshc")


def clip_min(a, lo: float):
    """Elementwise max(a, lo); gradient flows only where a > lo."""
    if not _is_var(a):
        return np.maximum(a, lo)
    out = Var(np.maximum(a.value, lo), (a,), None, "clip_min")

    def bw(g):
        a._accum(g * (a.value > lo))

    out._backward = bw
    return out


# -- reductions and shape ops ----------------------------------------------


def sum_(a, axis=None, keepdims=False):
    if not _is_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), None, "sum")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.value.shape).copy())

    out._backward = bw
    return out


def mean(a, axis=None, keepdims=False):
    if not _is_var(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    v = a.value
    count = v.size if axis is None else np.prod([v.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    if not _is_var(a):
        return np.reshape(a, shape)
    out = Var(a.value.reshape(shape), (a,), None, "reshape")

    def bw(g):
        a._accum(g.reshape(a.value.shape))

    out._backward = bw
    return out


def transpose(a):
    if not _is_var(a):
        return np.transpose(a)
    out = Var(a.value.T, (a,), None, "transpose")

    def bw(g):
        a._accum(g.T)

    out._backward = bw
    return out


def concat(parts: Iterable, axis: int = 0):
    parts = list(parts)
    if not _is_var(*parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    parts = [as_var(p) for p in parts]
    values = [p.value for p in parts]
    out = Var(np.concatenate(values, axis=axis), tuple(parts), None, "concat")
    sizes = [v.shape[axis] for v in values]

    def bw(g):
        offset = 0
        for p, size in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            p._accum(g[tuple(idx)])
            offset += size

    out._backward = bw
    return out


def stack_rows(rows: Iterable):
    """Stack 1-D rows into a 2-D matrix."""
    rows = list(rows)
    if not _is_var(*rows):
        return np.stack([np.asarray(r, dtype=np.float64) for r in rows])
    rows = [as_var(r) for r in rows]
    out = Var(np.stack([r.value for r in rows]), tuple(rows), None, "stack")

    def bw(g):
        for i, r in enumerate(rows):
            r._accum(g[i])

    out._backward = bw
    return out


def logsumexp(a, axis=None, keepdims=False):
    """Stable log-sum-exp; the per-slice max is treated as a constant shift."""
    if not _is_var(a):
        return _np_logsumexp(a, axis=axis, keepdims=keepdims)
    m = np.max(a.value, axis=axis, keepdims=True)
    out = add(log(sum_(exp(add(a, -m)), axis=axis, keepdims=True)), m)
    if not keepdims:
        target = np.sum(a.value, axis=axis, keepdims=False).shape
        out = reshape(out, target)
    return out


def softmax(a, axis=-1):
    return exp(add(a, mul(logsumexp(a, axis=axis, keepdims=True), -1.0)))


class Affine:
    """Weight/bias pair for a single feed-forward head: x -> x @ w.T + b."""

    __slots__ = ("w", "b")

    def __init__(self, w, b):
        self.w = w
        self.b = b


def affine(x, head: Affine):
    return add(matmul(x, transpose(head.w)), head.b)


# -- parameters --------------------------------------------------------------


class Parameter(Var):
    """Named trainable leaf. `gradient` reports the last backward result."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, op="param")
        self.name = name

    @property
    def gradient(self) -> Array:
        return self.grad if self.grad is not None else np.zeros_like(self.value)


class ParamStore(dict):
    """Ordered name -> Parameter mapping for one model instance."""

    def add(self, name: str, value) -> Parameter:
        if name in self:
            raise ValidationError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self[name] = p
        return p

    def values_map(self) -> dict[str, Array]:
        return {name: p.value for name, p in self.items()}

    def copy_values(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self.items()}

    def load_values(self, values: Mapping[str, Array]) -> None:
        for name, p in self.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValidationError(f"shape mismatch loading parameter {name!r}")
            p.value = arr.copy()


def evaluate_with_gradients(loss_fn, params: ParamStore):
    """Run `loss_fn(params)` and return (scalar loss, per-parameter gradients).

    `loss_fn` must build its result from substrate operations on the given
    parameters; gradients are exact reverse-mode derivatives.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.value)):
            raise NumericsError(f"non-finite value in parameter {name!r}")
        p.grad = None
    loss = loss_fn(params)
    if not isinstance(loss, Var):
        raise ValidationError("loss_fn must return a Var scalar")
    if loss.value.size != 1:
        raise ValidationError("loss_fn must return a scalar")
    loss.backward()
    grads = {name: p.gradient.copy() for name, p in params.items()}
    return float(loss.value), grads


def finite_difference_gradient(loss_fn, params: ParamStore, h: float = 1e-5):
    """Central-difference gradient oracle: (f(x+h) - f(x-h)) / (2h) per coordinate.

    `loss_fn` must be deterministic across probe evaluations (freeze any
    random draws before calling).
    """
    if h <= 0:
        raise ValidationError("finite-difference step h must be positive")

    def scalar(ps):
        out = loss_fn(ps)
        return float(out.value) if isinstance(out, Var) else float(out)

    grads: dict[str, Array] = {}
    for name, p in params.items():
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar(params)
            flat[i] = orig - h
            fm = scalar(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam (default) or plain-SGD state shared across all parameters."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "adam"
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: ParamStore, grads: Mapping[str, Array]):
    """Apply one update in place; returns (params, state)."""
    if state.mode not in ("adam", "sgd"):
        raise ValidationError(f"unknown optimizer mode {state.mode!r}")
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r}")
    state.step_count += 1
    if state.mode == "sgd":
        for name, p in params.items():
            p.value = p.value - state.learning_rate * grads[name]
        return params, state
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.value = p.value - state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# -- seeded randomness --------------------------------------------------------


class SeededRng:
    """Deterministic random source: numpy PCG64 behind a fixed 64-bit seed.

    Identical seed and draw sequence give identical outputs on every platform
    (PCG64 streams are stable under numpy's generator compatibility policy).
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self, shape=()) -> Array:
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def sample_standard_normal(rng: SeededRng, shape) -> Array:
    """I.i.d. standard-normal draws, deterministic given seed and draw order."""
    return rng.standard_normal(shape)
