"""Reverse-mode differentiable arrays.

Every operation on :class:`DiffArray` records its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks the
recorded graph in reverse topological order. Leaves accumulate into
``.grad`` until ``zero_grad`` is called.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import special


@dataclass
class BackwardReport:
    """What happened during one ``backward`` call."""

    n_nodes: int = 0
    nonfinite_ops: list = field(default_factory=list)

    @property
    def finite(self):
        return not self.nonfinite_ops


class DiffArray:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad and _backward is None else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def set_requires_grad(self, flag):
        if self._backward is not None:
            raise ValueError("requires_grad can only be toggled on leaves")
        self.requires_grad = bool(flag)
        self.grad = np.zeros_like(self.values) if flag else None

    def detach(self):
        return DiffArray(self.values)

    # -- reverse sweep -------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.values.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
        report = BackwardReport()
        if not self.requires_grad:
            return report

        topo = _topological_order(self)
        report.n_nodes = len(topo)
        grads = {id(self): np.ones_like(self.values)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                report.nonfinite_ops.append(node.op)
            if node._backward is None:
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return report

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_diff(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def parameter(values):
    """Leaf that receives gradients."""
    return DiffArray(values, requires_grad=True)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _node(values, parents, backward, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return DiffArray(values, True, tuple(parents), backward, op)
    return DiffArray(values, op=op)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b):
    a, b = as_diff(a), as_diff(b)
    sa, sb = a.shape, b.shape
    return _node(a.values + b.values, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_diff(a), as_diff(b)
    sa, sb = a.shape, b.shape
    return _node(a.values - b.values, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    return _node(av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    out = av / bv

    def backward(g):
        ga = g / bv
        return unbroadcast(ga, av.shape), unbroadcast(-ga * out, bv.shape)

    return _node(out, (a, b), backward, "div")


def neg(a):
    a = as_diff(a)
    return _node(-a.values, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    a = as_diff(a)
    p = float(exponent)
    av = a.values
    return _node(av**p, (a,), lambda g: (g * p * av ** (p - 1.0),), "pow")


def square(a):
    a = as_diff(a)
    av = a.values
    return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def exp(a):
    a = as_diff(a)
    out = np.exp(a.values)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_diff(a)
    av = a.values
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a):
    a = as_diff(a)
    out = np.tanh(a.values)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_diff(a)
    out = special.expit(a.values)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_diff(a)
    av = a.values
    return _node(np.logaddexp(0.0, av), (a,), lambda g: (g * special.expit(av),), "softplus")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    a = as_diff(a)
    x = a.values
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), backward, "gelu")


# -- linear algebra and reductions -------------------------------------------
def matmul(a, b):
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _node(av @ bv, (a, b), backward, "matmul")


def sum_(a, axis=None, keepdims=False):
    a = as_diff(a)
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_diff(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis=-1):
    a = as_diff(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(a.values, axis=axis), (a,), backward, "cumsum")


def softmax(a, axis=-1):
    a = as_diff(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


# -- shape manipulation -------------------------------------------------------
def reshape(a, shape):
    a = as_diff(a)
    old = a.shape
    return _node(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_diff(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.values, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index):
    a = as_diff(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] += g
        return (out,)

    return _node(a.values[index], (a,), backward, "getitem")


def flip(a, axis):
    a = as_diff(a)
    return _node(np.flip(a.values, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def concat(arrays, axis=-1):
    arrays = [as_diff(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.values for x in arrays], axis=axis), arrays, backward, "concat")


def stack(arrays, axis=0):
    arrays = [as_diff(x) for x in arrays]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([x.values for x in arrays], axis=axis), arrays, backward, "stack")


def pad_last(a, before, after, value=0.0):
    """Constant padding along the last axis."""
    a = as_diff(a)
    width = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    n = a.shape[-1]
    out = np.pad(a.values, width, constant_values=value)
    return _node(out, (a,), lambda g: (g[..., before:before + n],), "pad")
