"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records its inputs together with a vector-Jacobian product
(VJP) closure. Calling :func:`grad` on a scalar output walks the recorded
graph in reverse topological order and accumulates adjoints.

Only the primitives needed by the copula likelihoods are provided:
elementwise arithmetic with broadcasting, ``exp``/``log``, reductions,
``logsumexp``, batched ``matmul``, ``solve`` and ``logabsdet``, indexing and
stacking.

>>> x = Var(np.array([1.0, 2.0]))
>>> y = sum(x * x)
>>> grad(y, [x])[0]
array([2., 4.])
"""

import numpy as np
from scipy.special import expit, ndtr as _ndtr

from .model import logsumexp as _logsumexp

__all__ = [
    "Var", "grad", "value_and_grad", "exp", "log", "sum", "logsumexp",
    "log_sigmoid", "matmul", "solve", "logabsdet", "diagonal", "stack",
    "swapaxes", "reshape", "square", "sqrt", "ndtr",
]

class Var:
    """A node in the computation graph holding a float ndarray value."""

    __slots__ = ("value", "parents")
    __array_ufunc__ = None  # make ndarray operators defer to Var

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        # tuple of (parent Var, vjp: adjoint -> parent adjoint)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var({self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value,
               ((a, lambda g: _unbroadcast(g, sa)),
                (b, lambda g: _unbroadcast(g, sb))))


def neg(a):
    a = _lift(a)
    return Var(-a.value, ((a, lambda g: -g),))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return Var(av * bv,
               ((a, lambda g: _unbroadcast(g * bv, av.shape)),
                (b, lambda g: _unbroadcast(g * av, bv.shape))))


def div(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return Var(out,
               ((a, lambda g: _unbroadcast(g / bv, av.shape)),
                (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))))


def power(a, k):
    a = _lift(a)
    av = a.value
    return Var(av ** k, ((a, lambda g: g * k * av ** (k - 1)),))


def square(a):
    return power(a, 2)


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.value)
    return Var(out, ((a, lambda g: 0.5 * g / out),))


def ndtr(a):
    """Standard normal CDF."""
    a = _lift(a)
    av = a.value
    dens = np.exp(-0.5 * av * av) / np.sqrt(2.0 * np.pi)
    return Var(_ndtr(av), ((a, lambda g: g * dens),))


def exp(a):
    a = _lift(a)
    out = np.exp(a.value)
    return Var(out, ((a, lambda g: g * out),))


def log(a):
    a = _lift(a)
    av = a.value
    return Var(np.log(av), ((a, lambda g: g / av),))


def log_sigmoid(a):
    """``log(1 / (1 + exp(-a)))`` without overflow."""
    a = _lift(a)
    av = a.value
    return Var(-np.logaddexp(0.0, -av), ((a, lambda g: g * expit(-av)),))


def sum(a, axis=None, keepdims=False):
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(np.sum(a.value, axis=axis, keepdims=keepdims), ((a, vjp),))


def logsumexp(a, axis=None, keepdims=False):
    a = _lift(a)
    av = a.value
    out = _logsumexp(av, axis=axis, keepdims=True)
    soft = np.exp(av - out)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g * soft

    value = out if keepdims else (
        out.reshape(()) if axis is None else np.squeeze(out, axis=axis))
    return Var(value, ((a, vjp),))


def reshape(a, shape):
    a = _lift(a)
    old = a.shape
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),))


def swapaxes(a, i, j):
    a = _lift(a)
    return Var(np.swapaxes(a.value, i, j),
               ((a, lambda g: np.swapaxes(g, i, j)),))


def getitem(a, idx):
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], ((a, vjp),))


def stack(items, axis=0):
    items = [_lift(x) for x in items]
    parents = tuple(
        (x, (lambda g, i=i: np.take(g, i, axis=axis)))
        for i, x in enumerate(items))
    return Var(np.stack([x.value for x in items], axis=axis), parents)


def matmul(a, b):
    """Batched matrix product; both operands need ``ndim >= 2``."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return Var(av @ bv,
               ((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
                (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))))


def solve(a, b):
    """Batched ``a^{-1} b`` for square ``a`` of shape (..., p, p)."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    x = np.linalg.solve(av, bv)
    cache = {}

    def gb(g):
        # both VJPs receive the same adjoint object within one backward pass
        if cache.get("g") is not g:
            cache["g"] = g
            cache["gb"] = np.linalg.solve(np.swapaxes(av, -1, -2), g)
        return cache["gb"]

    def vjp_a(g):
        return _unbroadcast(-gb(g) @ np.swapaxes(x, -1, -2), av.shape)

    def vjp_b(g):
        return _unbroadcast(gb(g), bv.shape)

    return Var(x, ((a, vjp_a), (b, vjp_b)))


def logabsdet(a):
    """``log|det a|`` over the trailing two axes."""
    a = _lift(a)
    av = a.value
    _, out = np.linalg.slogdet(av)
    return Var(out, ((a, lambda g: g[..., None, None]
                      * np.swapaxes(np.linalg.inv(av), -1, -2)),))


def diagonal(a):
    """Diagonal of the trailing two axes, shape (..., p)."""
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        idx = np.arange(shape[-1])
        out[..., idx, idx] = g
        return out

    return Var(np.diagonal(a.value, axis1=-2, axis2=-1).copy(), ((a, vjp),))


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def grad(output, wrt):
    """Adjoints of scalar ``output`` with respect to each Var in ``wrt``."""
    if output.value.size != 1:
        raise ValueError("grad requires a scalar output")
    adj = {id(output): np.ones_like(output.value)}
    for node in reversed(_toposort(output)):
        g = adj.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + contrib
            else:
                adj[key] = contrib
    return [adj.get(id(v), np.zeros_like(v.value)) for v in wrt]


def value_and_grad(fn, *arrays):
    """Evaluate ``fn`` on fresh leaves built from ``arrays``.

    Returns the float value and a list of gradient arrays, one per input.
    """
    leaves = [Var(np.array(a, dtype=float)) for a in arrays]
    out = fn(*leaves)
    return float(out.value), grad(out, leaves)
