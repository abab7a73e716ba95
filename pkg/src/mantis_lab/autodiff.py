"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation returns a ``Tensor`` holding a float64
array plus, while gradients are enabled, a closure that propagates the
incoming adjoint to the operation's parents.  ``backward()`` walks the
tape in reverse topological order.  Shapes follow numpy broadcasting;
adjoints are summed back over broadcast axes.

Two primitives carry hand-written adjoints that a naive composition
would get wrong or unstable:

* ``soft_threshold`` -- dead-zone derivative is exactly zero, outside
  it du/dq = 1 and du/dlam = -sign(q).
* ``zoh_input_factor`` -- (exp(a*delta)-1)/a with the removable
  singularity at a*delta -> 0 and series-expanded derivatives where the
  direct quotient would cancel catastrophically.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A float64 array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, vjp):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- backward pass -----------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- operator overloads --------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor._make(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape) if a.requires_grad else None,
        _unbroadcast(g, b.data.shape) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor._make(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape) if a.requires_grad else None,
        _unbroadcast(-g, b.data.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor._make(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._make(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None,
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out = a.data ** e
    return Tensor._make(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable logistic on both tails
    out = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -700, 700)))
    return Tensor._make(out, (a,), lambda g: (g * sig,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -700, 700)))
    out = a.data * sig
    return Tensor._make(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),))


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._make(out, (a, b), vjp)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return Tensor._make(out, (a,), vjp)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the adjoint routes to the first maximal entry."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            mask = np.zeros_like(a.data)
            mask[np.unravel_index(np.argmax(a.data), a.data.shape)] = 1.0
            return (mask * g,)
        idx = np.argmax(a.data, axis=axis)
        mask = np.zeros_like(a.data)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask * gg,)

    return Tensor._make(out, (a,), vjp)


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._make(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.expand_dims(a.data, axis), (a,),
                        lambda g: (np.squeeze(g, axis=axis),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(parts), vjp)


def getitem(a, key) -> Tensor:
    """Basic slice/int indexing. Integer-array gathers go through ``take``."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return Tensor._make(out, (a,), vjp)


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return (ga,)

    return Tensor._make(out, (a,), vjp)


def gather_rows(a, indices: np.ndarray) -> Tensor:
    """Per-sample row gather: out[b, i] = a[b, indices[b, i]] for 3D ``a``."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    bidx = np.arange(a.data.shape[0])[:, None]
    out = a.data[bidx, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (bidx, idx), g)
        return (ga,)

    return Tensor._make(out, (a,), vjp)


# -- custom primitives ----------------------------------------------------


def soft_threshold(q, lam) -> Tensor:
    """Shrinkage operator sign(q) * max(|q| - lam, 0).

    Closed-form proximal map of the weighted L1 penalty.  Inside the
    dead zone |q| <= lam the output and both partial derivatives are
    exactly zero; outside, du/dq = 1 and du/dlam = -sign(q).
    """
    q, lam = as_tensor(q), as_tensor(lam)
    mag = np.abs(q.data) - lam.data
    active = mag > 0
    out = np.where(active, np.sign(q.data) * mag, 0.0)

    def vjp(g):
        gq = _unbroadcast(np.where(active, g, 0.0), q.data.shape)
        gl = _unbroadcast(np.where(active, -np.sign(q.data) * g, 0.0),
                          lam.data.shape)
        return gq, gl

    return Tensor._make(out, (q, lam), vjp)


def hard_threshold(q, lam) -> Tensor:
    """Pass q through where |q| > lam, zero otherwise.

    Trained with a straight-through surrogate: the adjoint treats the
    operator as the identity in q and ignores lam.
    """
    q, lam = as_tensor(q), as_tensor(lam)
    out = np.where(np.abs(q.data) > lam.data, q.data, 0.0)

    def vjp(g):
        return _unbroadcast(g, q.data.shape), None

    return Tensor._make(out, (q, lam), vjp)


_ZOH_LIMIT = 1e-8
_ZOH_SERIES = 1e-4


def zoh_input_factor(a, delta) -> Tensor:
    """(exp(a*delta) - 1) / a with the limit value delta as |a*delta| -> 0.

    d/d(delta) = exp(a*delta) everywhere.  d/da uses the rearrangement
    (delta*exp(a*delta) - out) / a, switching to the series
    delta^2 * (1/2 + s/3 + ...) below |a*delta| < 1e-4 where the
    rearranged quotient cancels catastrophically.
    """
    a, delta = as_tensor(a), as_tensor(delta)
    s = a.data * delta.data
    small = np.abs(s) < _ZOH_LIMIT
    if small.any():
        safe_a = np.where(small, 1.0, a.data)
        out = np.where(small, delta.data, np.expm1(s) / safe_a)
        es = np.where(small, 1.0 + s, np.expm1(s) + 1.0)
    else:
        out = np.expm1(s) / a.data
        es = out * a.data + 1.0

    def vjp(g):
        series = np.abs(s) < _ZOH_SERIES
        if series.any():
            safe_a = np.where(series, 1.0, a.data)
            da = (delta.data * es - out) / safe_a
            dd2 = delta.data * delta.data
            da = np.where(series,
                          dd2 * (0.5 + s / 3.0 + s * s / 8.0 + s ** 3 / 30.0),
                          da)
        else:
            da = (delta.data * es - out) / a.data
        return (_unbroadcast(g * da, a.data.shape)
                if a.requires_grad else None,
                _unbroadcast(g * es, delta.data.shape)
                if delta.requires_grad else None)

    return Tensor._make(out, (a, delta), vjp)


# -- composed helpers -----------------------------------------------------


def layer_norm(x, scale, shift, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply affine scale/shift."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), as_tensor(scale)), as_tensor(shift))


def softmax(logits, axis: int = -1) -> Tensor:
    """Stabilized softmax (max subtraction before exponentiation)."""
    logits = as_tensor(logits)
    shifted = sub(logits, tmax(logits, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {where}")
    return t
