"""Reverse-mode automatic differentiation over numpy arrays.

Every operation that touches a tensor requiring gradients records a node on
an implicit tape (its parents plus a closure mapping the output gradient to
parent gradients). ``Tensor.backward`` replays the tape in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None and requires_grad:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers ------------------------------------------------
    @staticmethod
    def make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        """Wrap an op result; record it on the tape if any parent needs grad."""
        out = Tensor(data)
        if is_grad_enabled() and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- backward ----------------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # drop the tape so intermediate buffers can be freed
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    def _topo(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    # -- arithmetic ------------------------------------------------------------
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
        return Tensor.make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor.make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- reductions and shape ops -------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor.make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    permute = transpose

    def exp(self):
        y = np.exp(self.data)
        return Tensor.make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor.make(np.log(x), (self,), lambda g: (g / x,))

    def abs(self):
        x = self.data
        return Tensor.make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def astype(self, dtype):
        old = self.data.dtype
        return Tensor.make(self.data.astype(dtype), (self,), lambda g: (g.astype(old),))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _operands(a, b):
    """Arrays for a binary op; a Python scalar takes the other side's float dtype."""
    x, y = _data(a), _data(b)
    if isinstance(a, (int, float)) and y.dtype.kind == "f":
        x = np.asarray(a, dtype=y.dtype)
    elif isinstance(b, (int, float)) and x.dtype.kind == "f":
        y = np.asarray(b, dtype=x.dtype)
    return x, y


def add(a, b) -> Tensor:
    x, y = _operands(a, b)
    return Tensor.make(x + y, (a, b), lambda g: (unbroadcast(g, x.shape), unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    x, y = _operands(a, b)
    return Tensor.make(x - y, (a, b), lambda g: (unbroadcast(g, x.shape), unbroadcast(-g, y.shape)))


def mul(a, b) -> Tensor:
    x, y = _operands(a, b)
    return Tensor.make(x * y, (a, b),
                       lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    x, y = _operands(a, b)
    return Tensor.make(x / y, (a, b),
                       lambda g: (unbroadcast(g / y, x.shape), unbroadcast(-g * x / (y * y), y.shape)))


def matmul(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    if x.ndim < 1 or y.ndim != 2:
        raise ValueError(f"matmul expects (..., D) @ (D, E), got {x.shape} @ {y.shape}")
    if x.shape[-1] != y.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")

    def backward(g):
        gx = g @ y.T
        gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gy

    return Tensor.make(x @ y, (a, b), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    x = _data(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.make(x.sum(axis=axis, keepdims=keepdims), (a,), backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    x = _data(a)
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros_like(x)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor.make(x[idx], (a,), backward)
