"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough ops for a transformer: matmul (including batched), broadcast
add, elementwise arithmetic, reshape/transpose, softmax, layer norm,
GELU, concatenation and mean reduction.  Arrays are float64.  Gradients
are exact and accumulated in topological order, so repeated runs are
bitwise identical.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Var:
    """Node in the computation graph."""

    __slots__ = ("data", "parents", "backward_fn", "grad")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast to reach its shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


def add(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data + b.data, (a, b))
    out.backward_fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data - b.data, (a, b))
    out.backward_fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data * b.data, (a, b))
    out.backward_fn = lambda g: (
        _unbroadcast(g * b.data, a.shape),
        _unbroadcast(g * a.data, b.shape),
    )
    return out


def scale(a, c: float):
    a = _lift(a)
    out = Var(a.data * c, (a,))
    out.backward_fn = lambda g: (g * c,)
    return out


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data @ b.data, (a, b))

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out.backward_fn = backward
    return out


def reshape(a, shape):
    a = _lift(a)
    out = Var(a.data.reshape(shape), (a,))
    out.backward_fn = lambda g: (g.reshape(a.shape),)
    return out


def transpose(a, axes):
    a = _lift(a)
    inv = np.argsort(axes)
    out = Var(a.data.transpose(axes), (a,))
    out.backward_fn = lambda g: (g.transpose(inv),)
    return out


def concat(vars_, axis=0):
    vars_ = [_lift(v) for v in vars_]
    out = Var(np.concatenate([v.data for v in vars_], axis=axis), tuple(vars_))
    sizes = [v.data.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]

    out.backward_fn = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def take_rows(a, start, stop):
    """Slice along the first axis."""
    a = _lift(a)
    out = Var(a.data[start:stop], (a,))

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    out.backward_fn = backward
    return out


def softmax(a, axis=-1):
    a = _lift(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Var(s, (a,))

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    out.backward_fn = backward
    return out


def gelu(a):
    """Exact (erf-form) GELU."""
    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = Var(x * cdf, (a,))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    out.backward_fn = backward
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-6):
    """Layer normalization over the last axis with learnable gain/bias."""
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Var(xhat * gamma.data + beta.data, (a, gamma, beta))
    d = x.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        # standard layer-norm backward
        ga = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return ga, gg, gb

    out.backward_fn = backward
    return out


def mean_square_error(pred, target):
    """Mean over all entries of (pred - target)^2; target is constant."""
    pred = _lift(pred)
    t = np.asarray(target, dtype=np.float64)
    diff = pred.data - t
    out = Var(np.mean(diff * diff), (pred,))
    out.backward_fn = lambda g: (g * 2.0 * diff / diff.size,)
    return out


def backward(root: Var) -> None:
    """Accumulate gradients of ``root`` (scalar or seeded via root.grad)
    into every reachable node's ``.grad``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    if root.grad is None:
        root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.grad is None or node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + g
