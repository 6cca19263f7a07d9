"""A minimal reverse-mode automatic differentiation engine over dense float64 arrays.

Every op builds a :class:`Tensor` remembering its parents and a backward
function mapping the output gradient to one gradient per parent. Calling
:func:`backward` walks the graph in reverse topological order; only leaves
with ``requires_grad`` keep their ``.grad`` (accumulated across calls until
:meth:`Tensor.zero_grad`).

Ops record a graph only when some input requires a gradient, so inference
on constant parameters costs no more than plain numpy.
"""
from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping, Sequence
import logging
from typing import Any, TypeVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray

from .errors import ShapeMismatch

Array = NDArray[np.float64]
BackwardFn = Callable[[Array], Sequence[Array | None]]

logger = logging.getLogger("Autodiff")


class Tensor:
    """A value in the graph."""
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
        name: str | None = None,
    ) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: ArrayLike | None = None) -> None:
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        backward({self: seed})

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"{self.__class__.__name__}(shape={self.shape}, op={self.op!r}{label})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, as_tensor(other))

    def __radd__(self, other: float) -> "Tensor":
        return add(as_tensor(other), self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return add(self, mul(as_tensor(other), as_tensor(-1.0)))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return mul(self, as_tensor(other))

    def __rmul__(self, other: float) -> "Tensor":
        return mul(as_tensor(other), self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(value: "Tensor | ArrayLike") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: Array, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _topological(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    for root in roots:
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in reversed(node.parents))
    return order


def backward(seeds: Mapping[Tensor, ArrayLike]) -> None:
    """Propagate seed gradients from one or more outputs back to the leaves."""
    pending: dict[int, Array] = {}
    for tensor, seed in seeds.items():
        g = np.asarray(seed, dtype=np.float64)
        if g.shape != tensor.shape:
            raise ShapeMismatch("backward", g.shape, tensor.shape)
        pending[id(tensor)] = pending.get(id(tensor), 0.0) + g
    for node in reversed(_topological(seeds)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        assert node.backward_fn is not None
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad


# Op registry; every entry is gradient-checked by the test suite.

_F = TypeVar("_F", bound=Callable[..., Tensor])
OPS: dict[str, Callable[..., Tensor]] = {}


def register(name: str) -> Callable[[_F], _F]:
    def decorator(fn: _F) -> _F:
        OPS[name] = fn
        return fn
    return decorator


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


@register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), backward_fn, "add")


@register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), backward_fn, "mul")


@register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def backward_fn(g: Array) -> tuple[Array, Array]:
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


@register("conv2d")
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1 or 2. ``x`` is (N, C, H, W), ``w`` is (O, C, 3, 3)."""
    if (
        x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3)
        or x.shape[1] != w.shape[1] or stride not in (1, 2)
        or (b is not None and b.shape != (w.shape[0],))
    ):
        shapes = (x.shape, w.shape) + ((b.shape,) if b is not None else ())
        raise ShapeMismatch(f"conv2d(stride={stride})", *shapes)
    n, c, height, width = x.shape
    out_h, out_w = (height - 1) // stride + 1, (width - 1) // stride + 1
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward_fn(g: Array) -> tuple[Array, ...]:
        dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        dpadded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                contribution = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dpadded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contribution
        dx = dpadded[:, :, 1:-1, 1:-1]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward_fn, "conv2d")


@register("relu")
def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward_fn(g: Array) -> tuple[Array]:
        return (g * positive,)
    return _result(np.where(positive, x.data, 0.0), (x,), backward_fn, "relu")


def _sigmoid(values: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


@register("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward_fn(g: Array) -> tuple[Array]:
        return (g * s * (1.0 - s),)
    return _result(s, (x,), backward_fn, "sigmoid")


@register("softplus")
def softplus(x: Tensor) -> Tensor:
    def backward_fn(g: Array) -> tuple[Array]:
        return (g * _sigmoid(x.data),)
    return _result(np.logaddexp(0.0, x.data), (x,), backward_fn, "softplus")


@register("upsample2x")
def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes of (N, C, H, W)."""
    if x.data.ndim != 4:
        raise ShapeMismatch("upsample2x", x.shape)
    n, c, height, width = x.shape

    def backward_fn(g: Array) -> tuple[Array]:
        return (g.reshape(n, c, height, 2, width, 2).sum(axis=(3, 5)),)
    return _result(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), backward_fn, "upsample2x")


@register("reshape")
def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, tuple(shape)) from None

    def backward_fn(g: Array) -> tuple[Array]:
        return (g.reshape(x.shape),)
    return _result(out, (x,), backward_fn, "reshape")


@register("reduce_mean")
def reduce_mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    axes = tuple(range(x.data.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else axis)
    if any(not -x.data.ndim <= a < x.data.ndim for a in axes):
        raise ShapeMismatch(f"reduce_mean(axis={axis})", x.shape)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward_fn(g: Array) -> tuple[Array]:
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)
    return _result(x.data.mean(axis=axes), (x,), backward_fn, "reduce_mean")


@register("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat(axis={axis})", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: Array) -> list[Array]:
        return list(np.split(g, bounds, axis=axis))
    return _result(out, tuple(tensors), backward_fn, "concat")


@register("take")
def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """The contiguous slice ``start:stop`` along ``axis``."""
    size = x.shape[axis]
    if not 0 <= start < stop <= size:
        raise ShapeMismatch(f"take({start}:{stop}, axis={axis})", x.shape)
    key: list[Any] = [slice(None)] * x.data.ndim
    key[axis] = slice(start, stop)
    index = tuple(key)

    def backward_fn(g: Array) -> tuple[Array]:
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)
    return _result(x.data[index].copy(), (x,), backward_fn, "take")


def numeric_gradient(f: Callable[[Array], float], x: Array, eps: float = 1e-5) -> Array:
    """Central finite differences with step ``eps * max(1, |x_i|)``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        h = eps * max(1.0, abs(float(x[i])))
        saved = x[i]
        x[i] = saved + h
        upper = f(x)
        x[i] = saved - h
        lower = f(x)
        x[i] = saved
        grad[i] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic: ArrayLike, numeric: ArrayLike) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-12)
    return float(np.max(np.abs(a - n))) / scale
