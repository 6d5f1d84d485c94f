"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major ``numpy.ndarray``.  Every differentiable
operation returns a new tensor that remembers its parents and a closure which,
given the gradient of the output, accumulates gradients into the parents.
Calling :meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order.

Only the handful of operations the attribute-recognition pipeline needs are
provided; see :mod:`dtmpar.core.ops` for the heavier ones.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dtmpar.errors import DimensionError

DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], None]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- array-like surface ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- gradient bookkeeping -------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to 1 and may only be omitted for single-element tensors.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=self.data.dtype), self.data.shape)

        order = _topological_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / other)

    def reciprocal(self) -> "Tensor":
        a = self
        out = 1.0 / a.data
        return Tensor._from_op(out, (a,), lambda g: a._accumulate(-g * out * out))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        out = a.data**exponent

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._from_op(out, (a,), backward)

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._from_op(out, (a,), lambda g: a._accumulate(g * out))

    def log(self) -> "Tensor":
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    # -- reductions and reshaping -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._from_op(np.asarray(out), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    def transpose(self, *axes) -> "Tensor":
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inverse = np.argsort(axes)
        return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inverse)))

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul needs (m,k)@(k,n); got {a.shape} @ {b.shape} (axis 1 vs axis 0)")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._from_op(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order
