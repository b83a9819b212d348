"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it requires a gradient,
records the primitive that produced it.  :func:`grad` walks the recorded
graph in reverse topological order.  Only the primitives defined in this
module are differentiable; handing a tensor to an arbitrary numpy ufunc
raises :class:`UnsupportedPrimitive` instead of silently dropping the graph.
"""
from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "UnsupportedPrimitive",
    "as_tensor",
    "grad",
    "matmul",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "lgamma",
    "softmax",
    "log_softmax",
    "concat",
    "stop_gradient",
]


class UnsupportedPrimitive(TypeError):
    """Raised when a tensor is passed to an operation with no gradient rule."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "name")

    # make numpy defer to our reflected operators (ndarray + Tensor -> Tensor.__radd__)
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, _parents=()):
        self.data = np.asarray(data, dtype=float) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self._parents = _parents
        self.name = name

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # ndarray (op) Tensor lands here; forward the differentiable arithmetic
        op = _UFUNC_OPS.get(ufunc.__name__)
        if op is not None and method == "__call__" and not kwargs:
            return op(*inputs)
        raise UnsupportedPrimitive(
            f"numpy ufunc {ufunc.__name__!r} has no gradient rule; use cradle.numerics.autodiff primitives"
        )

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitive(
            f"numpy function {func.__name__!r} has no gradient rule; use cradle.numerics.autodiff primitives"
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=float))


def _node(data, parents):
    """Build an output tensor; keep only parents that carry gradients."""
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    if live:
        return Tensor(data, requires_grad=True, _parents=live)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, ((a, lambda g: -g),))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
        ),
    )


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        (
            (a, lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)),
        ),
    )


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), ((a, lambda g: g * mask),))


def sigmoid(a):
    a = as_tensor(a)
    out = special.expit(a.data)
    return _node(out, ((a, lambda g: g * out * (1.0 - out)),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, ((a, lambda g: g * special.expit(a.data)),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, ((a, lambda g: g * out),))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), ((a, lambda g: g / a.data),))


def lgamma(a):
    a = as_tensor(a)
    return _node(special.gammaln(a.data), ((a, lambda g: g * special.digamma(a.data)),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    out = special.softmax(a.data, axis=axis)

    def back(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node(out, ((a, back),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    out = special.log_softmax(a.data, axis=axis)

    def back(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _node(out, ((a, back),))


def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _node(a.data.sum(axis=axis), ((a, back),))


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), ((a, lambda g: g.reshape(old)),))


def take(a, index):
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return full

    return _node(a.data[index], ((a, back),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(np.broadcast_to(a.data, shape), ((a, lambda g: _unbroadcast(g, old)),))


def concat(tensors, axis=-1):
    """Concatenate along ``axis`` after broadcasting the other axes."""
    tensors = [as_tensor(t) for t in tensors]
    nd = max(t.ndim for t in tensors)
    tensors = [t if t.ndim == nd else reshape(t, (1,) * (nd - t.ndim) + t.shape) for t in tensors]
    ax = axis % nd
    lead = np.broadcast_shapes(*[t.shape[:ax] + (1,) + t.shape[ax + 1:] for t in tensors])
    parts = []
    for t in tensors:
        target = lead[:ax] + (t.shape[ax],) + lead[ax + 1:]
        parts.append(t if t.shape == target else broadcast_to(t, target))
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)

    def make_back(k):
        def back(g):
            return np.split(g, sizes, axis=ax)[k]
        return back

    return _node(out, tuple((p, make_back(k)) for k, p in enumerate(parts)))


def stop_gradient(a):
    return as_tensor(a).detach()


_UFUNC_OPS = {
    "add": add,
    "subtract": lambda a, b: add(a, neg(b)),
    "multiply": mul,
    "true_divide": div,
    "matmul": matmul,
    "negative": neg,
}


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss, params):
    """Gradients of scalar ``loss`` with respect to each tensor in ``params``.

    ``params`` may be a sequence or a mapping of tensors; the result has the
    same structure, holding plain arrays.  Parameters the loss does not
    depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, fn in node._parents:
                contrib = fn(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    def pick(p):
        g = grads.get(id(p))
        return np.zeros_like(p.data) if g is None else np.array(g, dtype=p.data.dtype).reshape(p.shape)

    if isinstance(params, dict):
        return {k: pick(p) for k, p in params.items()}
    return [pick(p) for p in params]
