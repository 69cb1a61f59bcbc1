"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every value is a float64 matrix of shape ``(rows, cols)``. Operations that
involve at least one tensor with ``requires_grad`` record a :class:`Node`
holding the op name, its parents and a closure that maps the output gradient
to parent gradients. Node ids come from a global counter, so parents always
carry smaller ids than their children and sorting reachable nodes by id gives
a valid reverse topological order for :meth:`Tensor.backward`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

_ids = itertools.count()

ACTIVATIONS = ("sigmoid", "tanh", "relu")

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array with shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def node(self) -> Optional[Node]:
        return self._node

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self._node is None:
            raise UsageError("backward() called on a tensor that is not part of a graph")
        if self.shape != (1, 1):
            raise ShapeError(f"backward() needs a 1x1 loss, got {self.shape}")
        grads = {id(self): np.ones((1, 1))}
        for t in trace(self):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            for parent, pg in zip(t._node.parents, t._node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg


def trace(root: Tensor) -> list:
    """Tensors reachable from ``root`` that own a node, children first."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._node.parents)
    return sorted(seen.values(), key=lambda t: t._node.id, reverse=True)


def as_tensor(x) -> Tensor:
    """Wrap scalars and arrays as constant tensors; tensors pass through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(out: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    t = Tensor._wrap(out)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = Node(next(_ids), op, parents, backward)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "hadamard", lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return _make(ad ** p, (a,), "pow", lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(pick_a, a.data, b.data), (a, b), "maximum",
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(pick_a, a.data, b.data), (a, b), "minimum",
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def clamp(a: Tensor, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


# -- linear algebra and structure -------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(np.ascontiguousarray(a.data.T), (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    return _make(a.data.reshape(rows, cols), (a,), "reshape", lambda g: (g.reshape(shape),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty list")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ, {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat_cols", backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: empty list")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError(f"concat_rows: column counts differ, {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat_rows", backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), "slice_rows", backward)


def permute_rows(a: Tensor, perm) -> Tensor:
    """Rows of ``a`` reordered so that output row ``i`` is input row ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (a.rows,) or not np.array_equal(np.sort(perm), np.arange(a.rows)):
        raise ShapeError(f"permute_rows: {perm.tolist()} is not a permutation of {a.rows} rows")
    shape = a.shape

    def backward(g):
        full = np.empty(shape)
        full[perm] = g
        return (full,)

    return _make(a.data[perm], (a,), "permute_rows", backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[:, start:stop]), (a,), "slice_cols", backward)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum of all entries (1x1), of each column (axis=0) or of each row (axis=1)."""
    shape = a.shape
    if axis is None:
        out = np.array([[a.data.sum()]])
    elif axis in (0, 1):
        out = a.data.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"sum: axis must be None, 0 or 1, got {axis}")
    return _make(out, (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return tensor_sum(a) * (1.0 / a.data.size)


# -- nonlinearities -----------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, for both signs
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(kind: str, a: Tensor) -> Tensor:
    if kind == "sigmoid":
        out = _sigmoid(a.data)
        return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))
    if kind == "tanh":
        out = np.tanh(a.data)
        return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))
    if kind == "relu":
        mask = a.data > 0
        return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def sigmoid(a: Tensor) -> Tensor:
    return activation("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return activation("tanh", a)


def relu(a: Tensor) -> Tensor:
    return activation("relu", a)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along each row, max-shifted."""
    if a.cols < 1:
        raise ShapeError("row_softmax: needs at least one column")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("row_softmax: non-finite input")
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), "row_softmax", backward)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * mask, (a,), "dropout", lambda g: (g * mask,))
