"""Define-by-run reverse-mode differentiation over numpy arrays.

Every differentiable operation is a `Function` subclass with a numpy `forward` and a
`backward` that maps the output gradient to one gradient per input (or None). The
graph is rebuilt on every forward pass; `backward()` traces it from the loss.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import NumericError, ShapeError


logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

_PRECISION: ContextVar[str] = ContextVar("tctrans_precision", default="single")
_DEBUG_NUMERICS: ContextVar[bool] = ContextVar("tctrans_debug_numerics", default=False)
_DTYPES = {"single": np.float32, "double": np.float64}


def get_dtype() -> type:
    return _DTYPES[_PRECISION.get()]


def dtype_of(name: str) -> type:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    return _DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    token = _PRECISION.set(name)
    try:
        yield
    finally:
        _PRECISION.reset(token)


def set_debug_numerics(enabled: bool) -> None:
    _DEBUG_NUMERICS.set(bool(enabled))


@contextmanager
def debug_numerics(enabled: bool = True) -> Iterator[None]:
    token = _DEBUG_NUMERICS.set(bool(enabled))
    try:
        yield
    finally:
        _DEBUG_NUMERICS.reset(token)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations.

    `apply` runs `forward` on the input arrays and wraps the result in a Tensor that
    remembers this function, so `backward` can later be called with dL/d(output).
    Kink operations set `self.kink` to their activation pattern; gradient checking
    uses it to skip coordinates that cross a non-differentiable point.
    """

    kink: Optional[np.ndarray] = None

    def __init__(self, *tensors: "Tensor") -> None:
        self.inputs = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        if _DEBUG_NUMERICS.get() and not np.all(np.isfinite(out_data)):
            raise NumericError(f"{cls.__name__} produced non-finite values")
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, _creator=func if requires_grad else None)


class Tensor:
    """n-dimensional array taking part in a reverse-mode graph.

    Leaf tensors (parameters, inputs) accumulate `.grad` across backward calls until
    `zero_grad()`; intermediate tensors never keep one.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _creator: Optional[Function] = None,
    ) -> None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator

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
    def op(self) -> str:
        return type(self._creator).__name__ if self._creator is not None else "leaf"

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, _lift(other, self))

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(_lift(other, self), self)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=requires_grad, name=name)


class Graph:
    """Topologically ordered record of the operations that produced a root tensor."""

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._creator is not None:
                for parent in node._creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def kink_pattern(self) -> np.ndarray:
        patterns = [
            node._creator.kink.reshape(-1)
            for node in self.nodes
            if node._creator is not None and node._creator.kink is not None
        ]
        if not patterns:
            return np.zeros(0, dtype=np.int8)
        return np.concatenate([p.astype(np.int8) for p in patterns])


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every leaf tensor reachable from a scalar loss."""
    if loss.size != 1:
        raise ShapeError("backward", "loss must be a scalar", [loss.shape])
    if not loss.requires_grad:
        return
    graph = Graph.trace(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node._creator is None:
            continue
        input_grads = node._creator.backward(grad)
        for parent, parent_grad in zip(node._creator.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


# elementwise algebra


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, x: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * grad.dtype.type(self.factor),)


class Square(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return x * x

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (2 * grad * self.x,)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.kink = x > 0
        return np.where(self.kink, x, x.dtype.type(0))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.where(self.kink, grad, grad.dtype.type(0)),)


class Hinge(Relu):
    pass


class Abs(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.kink = np.sign(x)
        return np.abs(x)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.kink.astype(grad.dtype),)


class Sqrt(Function):
    def forward(self, x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
        self.x = x
        self.eps = eps
        self.y = np.sqrt(np.maximum(x, 0))
        return self.y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        live = self.x > self.eps
        safe = np.where(live, self.y, 1)
        return (np.where(live, grad * 0.5 / safe, 0).astype(grad.dtype),)


class Softmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        y = self.y
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


# reductions and reshaping


class Sum(Function):
    def forward(self, x: np.ndarray, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> np.ndarray:
        self.shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(a % len(self.shape) for a in axes)
            for a in sorted(axes):
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.shape).copy(),)


class MeanAll(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        count = int(np.prod(self.shape)) if self.shape else 1
        return (np.full(self.shape, grad.reshape(-1)[0] / count, dtype=grad.dtype),)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: Tuple[int, ...] = ()) -> np.ndarray:
        self.axes = axes
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.ascontiguousarray(grad.transpose(np.argsort(self.axes))),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 1) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.ascontiguousarray(part) for part in np.split(grad, self.splits, axis=self.axis))


class IndexSelect(Function):
    def forward(self, x: np.ndarray, indices: Optional[np.ndarray] = None, axis: int = 0) -> np.ndarray:
        self.shape = x.shape
        self.indices = np.asarray(indices, dtype=np.intp)
        self.axis = axis
        return np.take(x, self.indices, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(np.moveaxis(out, self.axis, 0), self.indices, np.moveaxis(grad, self.axis, 0))
        return (out,)


class Upsample2x(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        *lead, height, width = grad.shape
        blocks = grad.reshape(*lead, height // 2, 2, width // 2, 2)
        return (blocks.sum(axis=(-3, -1)),)


# linear algebra


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Attention(Function):
    """Scaled dot-product attention over [..., M, d] operands; saves only the weights."""

    def forward(self, q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float = 1.0) -> np.ndarray:
        self.q, self.k, self.v = q, k, v
        self.scale = q.dtype.type(scale)
        scores = np.matmul(q, np.swapaxes(k, -1, -2)) * self.scale
        scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
        self.weights = scores / scores.sum(axis=-1, keepdims=True)
        return np.matmul(self.weights, v)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        w = self.weights
        grad_v = np.matmul(np.swapaxes(w, -1, -2), grad)
        grad_w = np.matmul(grad, np.swapaxes(self.v, -1, -2))
        grad_s = w * (grad_w - (grad_w * w).sum(axis=-1, keepdims=True)) * self.scale
        grad_q = np.matmul(grad_s, self.k)
        grad_k = np.matmul(np.swapaxes(grad_s, -1, -2), self.q)
        return grad_q, grad_k, grad_v


class Conv2d(Function):
    """2-D cross-correlation via strided windows and one tensordot per pass."""

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        self.w = w
        k = w.shape[-1]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp_shape = xp.shape
        self.windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        s, p = self.stride, self.padding
        k = self.w.shape[-1]
        out_h, out_w = grad.shape[2], grad.shape[3]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))
        cols = np.tensordot(grad, self.w, axes=([1], [0]))
        grad_xp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                grad_xp[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        height, width = self.x_shape[2], self.x_shape[3]
        grad_x = grad_xp[:, :, p : p + height, p : p + width] if p else grad_xp
        return np.ascontiguousarray(grad_x), grad_w, grad_b


class GroupNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int = 1, eps: float = 1e-5) -> np.ndarray:
        batch, channels, height, width = x.shape
        self.shape = x.shape
        self.groups = groups
        self.gamma = gamma
        grouped = x.reshape(batch, groups, channels // groups, height, width)
        mean = grouped.mean(axis=(2, 3, 4), keepdims=True)
        var = grouped.var(axis=(2, 3, 4), keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = (grouped - mean) * self.inv_std
        xhat = self.xhat.reshape(self.shape)
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        batch, channels, height, width = self.shape
        xhat = self.xhat.reshape(self.shape)
        grad_gamma = (grad * xhat).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        dxhat = (grad * self.gamma[None, :, None, None]).reshape(self.xhat.shape)
        count = dxhat[0, 0].size
        axes = (2, 3, 4)
        grad_x = (self.inv_std / count) * (
            count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True)
        )
        return grad_x.reshape(self.shape), grad_gamma, grad_beta


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        self.gamma = gamma
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = (x - mean) * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = (grad * self.xhat).sum(axis=lead)
        grad_beta = grad.sum(axis=lead)
        dxhat = grad * self.gamma
        count = dxhat.shape[-1]
        grad_x = (self.inv_std / count) * (
            count * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


# functional surface


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def hinge(x: Tensor) -> Tensor:
    """max(0, x) with subgradient 0 at the boundary."""
    return Hinge.apply(x)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    return Abs.apply(x)


def sqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Exact square root; the gradient is zero wherever the radicand is <= eps."""
    return Sqrt.apply(x, eps=eps)


def softmax_lastdim(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean_all(x: Tensor) -> Tensor:
    return MeanAll.apply(x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", f"cannot reshape {x.size} elements", [x.shape, shape])
    return Reshape.apply(x, shape=shape)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for d, (a, b) in enumerate(zip(ref, t.shape)) if d != axis % len(ref)):
            raise ShapeError("concat", f"extents differ off axis {axis}", [t.shape for t in tensors])
    return Concat.apply(*tensors, axis=axis)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels", "expected [B,C,H,W] operands", [a.shape, b.shape])
    return concat([a, b], axis=1)


def index_select(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    return IndexSelect.apply(x, indices=np.asarray(indices, dtype=np.intp), axis=axis)


def upsample2x_nearest(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("upsample2x_nearest", "needs at least two spatial axes", [x.shape])
    return Upsample2x.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner extents differ", [a.shape, b.shape])
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeError("attention", "q, k, v must share a shape", [q.shape, k.shape, v.shape])
    return Attention.apply(q, k, v, scale=scale)


def attention_weights(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return scores / scores.sum(axis=-1, keepdims=True)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", "expected input [B,Cin,H,W] and weight [Cout,Cin,k,k]", [x.shape, weight.shape])
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "conv2d", f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}", [x.shape, weight.shape]
        )
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ShapeError("conv2d", "kernel must be square", [weight.shape])
    if bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d", "bias must have Cout entries", [weight.shape, bias.shape])
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", f"stride {stride} / padding {padding} invalid", [x.shape])
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d", f"padded input smaller than kernel {k}", [x.shape, weight.shape])
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("group_norm", "expected [B,C,H,W]", [x.shape])
    channels = x.shape[1]
    if groups < 1 or channels % groups:
        raise ShapeError("group_norm", f"{channels} channels not divisible into {groups} groups", [x.shape])
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("group_norm", "affine parameters must have C entries", [x.shape, gamma.shape, beta.shape])
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    return GroupNorm.apply(x, gamma, beta, groups=groups, eps=eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError("layer_norm", f"last extent {dim} does not match affine parameters", [x.shape, gamma.shape])
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(op, "operands do not broadcast", [a.shape, b.shape]) from exc
