"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray and records the operations applied
to it. Calling :meth:`Tensor.backward` on a scalar result replays the
recorded graph in reverse topological order, visiting every node exactly
once, and accumulates gradients into every tensor created with
``requires_grad=True``.

The op set is deliberately small: exactly what dense point-cloud layers
need (affine maps, ReLU/sigmoid, softmax, row gather/scatter, max/mean
reductions, concatenation). Everything runs in double precision so that
finite-difference checks have headroom.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # collapse leading axes added by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were size-1 in the original
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name", "_argmax")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        """Detached copy of the value."""
        return self.data.copy()

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph traversal ------------------------------------------------
    def _topo(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self, upstream=None) -> None:
        """Accumulate gradients of this tensor w.r.t. every graph input.

        `upstream` defaults to ones (a scalar seed for scalar outputs).
        """
        if upstream is None:
            upstream = np.ones_like(self.data)
        else:
            upstream = np.asarray(upstream, dtype=np.float64)
            if upstream.shape != self.data.shape:
                raise ShapeError(
                    f"upstream gradient shape {upstream.shape} != output shape {self.data.shape}"
                )
        self._accumulate(upstream)
        for node in reversed(self._topo()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------
    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data ** 2), other.data.shape)
                )

        out._backward = bwd
        return out

    def matmul(self, other):
        other = self._lift(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul: inner dims {self.data.shape} @ {other.data.shape}"
            )
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                a = self.data.reshape(-1, self.data.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                other._accumulate(a.T @ gg)

        out._backward = bwd
        return out

    __matmul__ = matmul

    # -- nonlinearities ---------------------------------------------------
    def relu(self):
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0), _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        out._backward = bwd
        return out

    def sigmoid(self):
        # numerically stable two-branch logistic
        x = self.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        out = Tensor(s, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * s * (1.0 - s))

        out._backward = bwd
        return out

    def exp(self):
        e = np.exp(self.data)
        out = Tensor(e, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * e)

        out._backward = bwd
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        out._backward = bwd
        return out

    def sqrt(self):
        r = np.sqrt(self.data)
        out = Tensor(r, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / r)

        out._backward = bwd
        return out

    def softmax(self, axis=-1):
        """Softmax with the exact Jacobian in the backward pass."""
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                dot = (g * y).sum(axis=axis, keepdims=True)
                self._accumulate(y * (g - dot))

        out._backward = bwd
        return out

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis):
        """Column/row maximum; gradient routes only to the argmax entries.

        Ties resolve to the lowest index (np.argmax convention).
        """
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis).squeeze(axis)
        out = Tensor(out_data, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.put_along_axis(
                    full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
                )
                self._accumulate(full)

        out._backward = bwd
        out.name = "max"
        # callers sometimes need the routing indices (e.g. pooling inspection)
        out._argmax = idx  # type: ignore[attr-defined]
        return out

    # -- indexing / structure -------------------------------------------------
    def take(self, indices):
        """Gather rows: out[i...] = self[indices[i...]].

        `indices` is an integer ndarray of any shape; the result has shape
        ``indices.shape + self.shape[1:]``. Backward scatter-adds.
        """
        indices = np.asarray(indices)
        out = Tensor(self.data[indices], _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, indices, g)
                self._accumulate(full)

        out._backward = bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.data.shape))

        out._backward = bwd
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)

        out._backward = bwd
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def concat(tensors, axis=-1) -> Tensor:
    """Concatenate tensors along `axis` with gradient splitting."""
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    out._backward = bwd
    return out


def where_mask(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """Select `a` where `mask` is true, a constant `fill` elsewhere.

    `mask` is a plain boolean ndarray (no gradient through the predicate);
    used for padding-aware max pooling.
    """
    a = Tensor._lift(a)
    out = Tensor(np.where(mask, a.data, fill), _parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.where(mask, g, 0.0))

    out._backward = bwd
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits.

    Stable form: max(z,0) - z*t + log1p(exp(-|z|)); the gradient is
    sigmoid(z) - t.
    """
    targets = np.asarray(targets, dtype=np.float64)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(loss, _parents=(logits,))

    def bwd(g):
        if logits.requires_grad:
            s = 1.0 / (1.0 + np.exp(-z))
            logits._accumulate(g * (s - targets))

    out._backward = bwd
    return out
