"""Dense tensors with reverse-mode automatic differentiation.

The engine is intentionally small. A :class:`Tensor` wraps a numpy array,
each differentiable operation pushes one record onto the active
:class:`GradTape`, and ``GradTape.backward`` replays the records in exact
reverse execution order. A tape lives for a single forward pass and is
discarded after backward. When no tape is active, operations run as plain
numpy with no recording, which is the inference path.

Non-finite values are an error path, never silent: tensor creation and every
recorded operation validate their output and raise :class:`NumericError`
naming the operation that produced the bad value.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = ["Tensor", "GradTape", "as_tensor", "concat"]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active_tape: "GradTape | None" = None


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float64)
    return arr


class Tensor:
    """n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        if not np.isfinite(self.data).all():
            raise NumericError("tensor initialised with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @staticmethod
    def _wrap(data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data that does not participate in gradients."""
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )

    # arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, dtype=self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, dtype=self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # shape and reductions -------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


class GradTape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around one forward pass; ``backward`` replays
    the records in reverse and accumulates gradients into every
    ``requires_grad`` tensor that participated. Leaves recorded on the tape
    but unreachable from the loss receive an explicit zero gradient.
    """

    def __init__(self):
        self._records: list[tuple] = []
        self._prev: GradTape | None = None

    def __enter__(self) -> "GradTape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        if not np.isfinite(loss.data).all():
            raise NumericError("backward called on a non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for name, out, inputs, fn in reversed(self._records):
            gout = out.grad
            if gout is None:
                continue
            grads = fn(gout)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient from {name}")
                # out-of-place accumulation: a first-touch gradient may alias
                # another tensor's buffer, so it must never be mutated
                t.grad = g if t.grad is None else t.grad + g
        for _, _, inputs, _ in self._records:
            for t in inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)


def active_tape() -> GradTape | None:
    return _active_tape


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def _apply(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
           backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericError(f"non-finite values produced by {name}")
    tape = _active_tape
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, req)
    if req:
        tape._records.append((name, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data + b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _apply("add", out, (a, b), backward)
    out = a.data + b

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _apply("add", out, (a,), backward)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data - b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _apply("sub", out, (a, b), backward)
    out = a.data - b

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _apply("sub", out, (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data * b.data

        def backward(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))

        return _apply("mul", out, (a, b), backward)
    out = a.data * b

    def backward(g):
        return (_unbroadcast(g * b, a.shape),)

    return _apply("mul", out, (a,), backward)


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data / b.data

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * out / b.data, b.shape))

        return _apply("div", out, (a, b), backward)
    out = a.data / b

    def backward(g):
        return (_unbroadcast(g / b, a.shape),)

    return _apply("div", out, (a,), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _apply("neg", -a.data, (a,), backward)


# -- elementwise unary -------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _apply("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _apply("log", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _apply("sqrt", out, (a,), backward)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo); the subgradient at the boundary is 0."""
    out = np.maximum(a.data, lo)

    def backward(g):
        return (g * (a.data > lo),)

    return _apply("clamp_min", out, (a,), backward)


# -- shape movement ----------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _apply("reshape", out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _apply("transpose", out, (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        gz = np.zeros_like(a.data)
        gz[key] = g
        return (gz,)

    return _apply("getitem", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _apply("concat", out, tensors, backward)


# -- reductions --------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _apply("sum", np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _apply("mean", np.asarray(out), (a,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", out, (a, b), backward)
