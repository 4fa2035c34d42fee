"""Dense tensors with reverse-mode automatic differentiation.

Data lives in numpy arrays. Every operation on tensors that require
gradients records a node with a backward closure; calling ``backward()``
on a scalar walks the recorded graph once in reverse topological order
and sums gradients into the leaves.

Two process-wide knobs control behaviour:

* default dtype: float64 (verification mode) or float32 (training mode),
  switched with :func:`set_default_dtype` or the :func:`precision`
  context manager;
* gradient recording, disabled inside :func:`no_grad` blocks.

Shape rules are deliberately strict. Binary operations require equal
shapes, or one operand's shape must be an exact trailing suffix of the
other's (the smaller operand is expanded across leading batch axes).
Size-1 stretching and any other numpy broadcast is a ShapeError.

Every operation checks its output for NaN/Inf and raises NumericError
instead of letting bad values propagate silently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Tuple

import numpy as np

from ..errors import NumericError, ShapeError

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors (np.float32 or np.float64)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported default dtype {dt}; use float32 or float64")
    _DTYPE = dt.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype."""
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, snapshots)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if arr.size == 0:
        return
    # min/max propagate NaN and catch Inf without allocating a bool mask
    if not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _suffix_shape(sa: Tuple[int, ...], sb: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    """Output shape for a binary op under the trailing-suffix rule."""
    if sa == sb:
        return sa
    if len(sa) > len(sb):
        if sb == sa[len(sa) - len(sb):]:
            return sa
    elif len(sb) > len(sa):
        if sa == sb[len(sb) - len(sa):]:
            return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not match and neither is a "
                     f"trailing suffix of the other")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the leading axes added by suffix expansion."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    if g.shape != shape:
        raise ShapeError(f"gradient shape {g.shape} cannot reduce to {shape}")
    return g


class Tensor:
    """A numpy-backed array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        _assert_finite(arr, "leaf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None
        self._op = "leaf"

    # ------------------------------------------------------------------
    # construction helpers

    @staticmethod
    def _make(data: np.ndarray, parents: Tuple["Tensor", ...], op: str,
              backward: Optional[Callable[[], None]]) -> "Tensor":
        """Wrap an op result, recording the node only when grads are live."""
        data = np.asarray(data)
        _assert_finite(data, op)
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new tensor sharing data but cut out of the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = "detach"
        return t

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"op={self._op}, requires_grad={self.requires_grad})")

    # ------------------------------------------------------------------
    # backward

    def backward(self) -> None:
        """Backpropagate from this scalar.

        Each call contributes exactly one unit of gradient: interior
        node buffers are cleared per pass, while leaf gradients
        accumulate across calls until the caller resets them.
        """
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._ensure_grad()
        self.grad = self.grad + np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward()

    # ------------------------------------------------------------------
    # elementwise arithmetic

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out_shape = _suffix_shape(self.shape, other.shape, "add")
        data = self.data + other.data
        if data.shape != out_shape:  # pragma: no cover - suffix rule guarantees this
            raise ShapeError(f"add produced {data.shape}, expected {out_shape}")
        a, b = self, other

        def backward():
            g = out.grad
            if a.requires_grad:
                a._ensure_grad()
                a.grad += _reduce_to(g, a.shape)
            if b.requires_grad:
                b._ensure_grad()
                b.grad += _reduce_to(g, b.shape)

        out = Tensor._make(data, (a, b), "add", backward)
        return out

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        a = self

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += -out.grad

        out = Tensor._make(-self.data, (a,), "neg", backward)
        return out

    def __sub__(self, other):
        return self.__add__(self._coerce(other).__neg__())

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        _suffix_shape(self.shape, other.shape, "mul")
        a, b = self, other

        def backward():
            g = out.grad
            if a.requires_grad:
                a._ensure_grad()
                a.grad += _reduce_to(g * b.data, a.shape)
            if b.requires_grad:
                b._ensure_grad()
                b.grad += _reduce_to(g * a.data, b.shape)

        out = Tensor._make(self.data * other.data, (a, b), "mul", backward)
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        other = self._coerce(other)
        _suffix_shape(self.shape, other.shape, "div")
        a, b = self, other

        def backward():
            g = out.grad
            if a.requires_grad:
                a._ensure_grad()
                a.grad += _reduce_to(g / b.data, a.shape)
            if b.requires_grad:
                b._ensure_grad()
                b.grad += _reduce_to(-g * a.data / (b.data * b.data), b.shape)

        with np.errstate(divide="ignore", invalid="ignore"):
            data = self.data / other.data
        out = Tensor._make(data, (a, b), "div", backward)
        return out

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ShapeError("pow supports scalar exponents only")
        a = self
        e = float(exponent)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad * e * np.power(a.data, e - 1.0)

        out = Tensor._make(np.power(self.data, e), (a,), "pow", backward)
        return out

    # ------------------------------------------------------------------
    # reductions and shape ops

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward():
            if not a.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._ensure_grad()
            a.grad += np.broadcast_to(g, a.shape)

        out = Tensor._make(np.asarray(data), (a,), "sum", backward)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = self.data.reshape(shape)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad.reshape(a.shape)

        out = Tensor._make(data, (a,), "reshape", backward)
        return out

    def transpose(self, axes: Tuple[int, ...]):
        a = self
        inv = np.argsort(axes)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad.transpose(inv)

        out = Tensor._make(self.data.transpose(axes), (a,), "transpose", backward)
        return out

    # ------------------------------------------------------------------
    # matmul

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires tensors of rank >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not agree")
        if a.ndim != b.ndim:
            # the lower-rank operand must be a plain matrix shared across batches
            if min(a.ndim, b.ndim) != 2:
                raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
        elif a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims {a.shape} vs {b.shape} differ")
        data = np.matmul(a.data, b.data)

        def backward():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._ensure_grad()
                a.grad += _reduce_to(ga, a.shape)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._ensure_grad()
                b.grad += _reduce_to(gb, b.shape)

        out = Tensor._make(data, (a, b), "matmul", backward)
        return out

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def relu(self):
        a = self
        mask = self.data > 0

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad * mask

        out = Tensor._make(self.data * mask, (a,), "relu", backward)
        return out

    def exp(self):
        a = self
        data = np.exp(self.data)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad * out.data

        out = Tensor._make(data, (a,), "exp", backward)
        return out

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(self.data)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad / a.data

        out = Tensor._make(data, (a,), "log", backward)
        return out

    def sqrt(self):
        a = self
        data = np.sqrt(self.data)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad * 0.5 / out.data

        out = Tensor._make(data, (a,), "sqrt", backward)
        return out

    def sigmoid(self):
        a = self
        # stable in both tails
        data = np.where(self.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(self.data))),
                        np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))))

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad * out.data * (1.0 - out.data)

        out = Tensor._make(data, (a,), "sigmoid", backward)
        return out

    def clamp(self, lo: float, hi: float):
        a = self
        mask = (self.data >= lo) & (self.data <= hi)

        def backward():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad * mask

        out = Tensor._make(np.clip(self.data, lo, hi), (a,), "clamp", backward)
        return out


def _toposort(root: Tensor) -> list:
    """Reverse topological order of the graph above ``root`` (root first).

    Iterative so deep training graphs never hit the recursion limit; each
    node is visited exactly once.
    """
    order: list = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order
