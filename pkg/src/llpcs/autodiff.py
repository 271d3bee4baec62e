"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the operations needed by the MLP family and the bag losses are
provided. Operations are recorded on the innermost active :class:`Tape`
whenever one of their inputs requires a gradient; outside a tape they
just compute values.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(RuntimeError):
    """Raised when the tape is used outside its one-shot contract."""


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "backward_fn", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the reflected Tensor method

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, grad={self.requires_grad})"

    def numpy(self):
        return self.value

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
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Records one scalar-loss evaluation and differentiates it once.

    >>> w = Parameter([1.0, 2.0])
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> tape.gradient(loss, [w])[0]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        if self.used:
            raise ContractError("tape already consumed by a backward pass")
        if not isinstance(loss, Tensor) or loss.value.size != 1:
            raise ContractError("backward root must be a scalar Tensor")
        self.used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [
            grads[id(p)].reshape(p.value.shape) if id(p) in grads else np.zeros_like(p.value)
            for p in params
        ]


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``params`` (zeros when unreachable)."""
    return tape.gradient(loss, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).value)


def _make(value, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(value)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# Backward functions return None for parents that do not need a gradient.


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(g, b.shape) if b.requires_grad else None),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g, b.shape) if b.requires_grad else None),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.value, b.shape) if b.requires_grad else None),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, b.value) if b.ndim == 1 else g @ b.value.T
        if b.requires_grad:
            gb = a.value.T @ g
        return ga, gb

    return _make(a.value @ b.value, (a, b), grad)


def linear(x, w, b) -> Tensor:
    """Fused dense layer ``x @ w + b`` for 2-D ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)

    def grad(g):
        gx = (np.outer(g, w.value) if w.ndim == 1 else g @ w.value.T) if x.requires_grad else None
        return gx, x.value.T @ g, g.sum(axis=0)

    return _make(x.value @ w.value + b.value, (x, w, b), grad)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.value)
    return _make(r, (a,), lambda g: (g * 0.5 / r,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), grad)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) * (1.0 / n)


def take(a, index) -> Tensor:
    """Row selection ``a[index]`` (slice or integer array)."""
    a = as_tensor(a)

    def grad(g):
        out = np.zeros_like(a.value)
        if isinstance(index, slice):
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), grad)


def gather_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    return take(table, ids)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.value for t in ts], axis=axis), tuple(ts), grad)


def segment_mean(a, offsets: np.ndarray) -> Tensor:
    """Mean over contiguous row segments ``a[offsets[j]:offsets[j+1]]``.

    ``offsets`` has one more entry than there are segments and ends at
    ``len(a)``.
    """
    a = as_tensor(a)
    offsets = np.asarray(offsets, dtype=np.int64)
    sizes = np.diff(offsets)
    if np.any(sizes <= 0):
        raise ValueError("segments must be nonempty")
    shape = (-1,) + (1,) * (a.ndim - 1)
    sums = np.add.reduceat(a.value, offsets[:-1], axis=0)
    inv = (1.0 / sizes).reshape(shape)

    def grad(g):
        return (np.repeat(g * inv, sizes, axis=0),)

    return _make(sums * inv, (a,), grad)


def append_ones(a) -> Tensor:
    """Append a constant-1 column to a 2-D tensor."""
    a = as_tensor(a)
    return concat([a, Tensor(np.ones((a.shape[0], 1)))], axis=1)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))
