"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

Every public op keeps data in float32; reductions accumulate in float64
before casting back. Graph recording can be switched off with `no_grad()`
for inference-only forward passes.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure-numpy forward)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_f32(x):
    a = np.asarray(x, dtype=np.float32)
    return a


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32)


class Tensor:
    """A float32 array node in the reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def param(data):
        return Tensor(data, requires_grad=True)

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- graph plumbing -------------------------------------------------------
    @staticmethod
    def _make(data, parents, vjp):
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            return Tensor(data, requires_grad=False, parents=parents, vjp=vjp)
        return Tensor(data)

    def backward(self):
        """Backpropagate from a scalar node; fills .grad on reachable leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = Tensor._lift(other)
        out = self.data + other.data
        sa, sb = self.data.shape, other.data.shape
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        out = self.data - other.data
        sa, sb = self.data.shape, other.data.shape
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = self.data * other.data
        a, b = self, other
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                       _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out = self.data / other.data
        a, b = self, other
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                       _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __matmul__(self, other):
        other = Tensor._lift(other)
        out = self.data @ other.data
        a, b = self, other
        return Tensor._make(out, (a, b),
                            lambda g: (g @ b.data.T, a.data.T @ g))

    def square(self):
        a = self
        return Tensor._make(self.data * self.data, (a,), lambda g: (2.0 * g * a.data,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def relu(self):
        out = np.maximum(self.data, 0.0)
        mask = (self.data > 0.0).astype(np.float32)
        return Tensor._make(out, (self,), lambda g: (g * mask,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sum(self, axis=None):
        out = np.sum(self.data, axis=axis, dtype=np.float64).astype(np.float32)
        shape = self.data.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(np.float32),)
            ge = np.expand_dims(g, axis)
            return (np.broadcast_to(ge, shape).astype(np.float32),)

        return Tensor._make(out, (self,), vjp)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * np.float32(1.0 / n)

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor._make(self.data.reshape(*shape), (self,),
                            lambda g: (g.reshape(old),))

    def minimum(self, other):
        other = Tensor._lift(other)
        out = np.minimum(self.data, other.data)
        mask = (self.data <= other.data).astype(np.float32)
        a, b = self, other
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g * mask, a.data.shape),
                                       _unbroadcast(g * (1.0 - mask), b.data.shape)))

    def clip(self, lo, hi):
        out = np.clip(self.data, lo, hi)
        mask = ((self.data > lo) & (self.data < hi)).astype(np.float32)
        return Tensor._make(out, (self,), lambda g: (g * mask,))


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), vjp)


def check_finite(name, arr):
    """Raise if `arr` contains NaN/Inf; used at public-surface boundaries."""
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")
