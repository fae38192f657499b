"""
File: Dense float64 tensors with reverse-mode gradient accumulation

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from typing import List, Dict, Tuple, Optional, Callable, Sequence, Union, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .util import ShapeError, DomainError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    An n-d float64 array, row-major. Values produced by operations are checked to be finite.

    A tensor either is a leaf (constant or trainable parameter) or was produced by an op while a
    Tape was active, in which case it keeps references to its parents and to the backward rule.
    """
    __slots__ = ("data", "trainable", "name", "parents", "backward_fn", "requires_grad")
    # numpy defers mixed operands (ndarray - Tensor) to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, data, trainable: bool = False, name: str = "") -> None:
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.trainable = trainable
        self.name = name
        self.parents: Tuple[Tensor, ...] = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.requires_grad = trainable

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() called on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        kind = "param" if self.trainable else "tensor"
        return f"{kind}({self.name or ''}{list(self.shape)})"

    # operators
    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, key) -> Tensor:
        return slice_(self, key)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ==================================================================================================
# Tape
# ==================================================================================================
class Tape:
    """
    Records operations in execution order, which is a valid topological order of the graph.
    Usage:
        with Tape() as tape:
            loss = f(params)
        grads = tape.backward(loss)
    """
    _active: List[Tape] = []

    def __init__(self) -> None:
        self.nodes: List[Tensor] = []

    def __enter__(self) -> Tape:
        Tape._active.append(self)
        return self

    def __exit__(self, *args) -> None:
        Tape._active.remove(self)

    @classmethod
    def current(cls) -> Optional[Tape]:
        return cls._active[-1] if cls._active else None

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = Gradients()
        if not loss.requires_grad:
            return grads
        grads.accumulate(loss, np.ones_like(loss.data))

        for node in reversed(self.nodes):
            g = grads.get(node)
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                grads.accumulate(parent, pg)
        return grads


class Gradients:
    """ Gradient buffers keyed by node; nodes that did not participate have zero gradient """

    def __init__(self) -> None:
        self._buffers: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def accumulate(self, node: Tensor, grad: np.ndarray) -> None:
        entry = self._buffers.get(id(node))
        if entry is None:
            self._buffers[id(node)] = (node, np.array(grad, dtype=np.float64))
        else:
            entry[1][...] += grad

    def get(self, node: Tensor) -> Optional[np.ndarray]:
        entry = self._buffers.get(id(node))
        return None if entry is None else entry[1]

    def __getitem__(self, node: Tensor) -> np.ndarray:
        g = self.get(node)
        return np.zeros_like(node.data) if g is None else g

    def __contains__(self, node: Tensor) -> bool:
        return id(node) in self._buffers

    def leaves(self) -> List[Tuple[Tensor, np.ndarray]]:
        return [(n, g) for n, g in self._buffers.values() if n.trainable]


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Gradients:
    """ Gradient of a scalar loss w.r.t. every trainable leaf it depends on """
    tape = tape or Tape.current()
    if tape is None:
        raise ShapeError("backward() called without an active tape")
    return tape.backward(loss)


def _make(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.trainable = False
    out.name = ""
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False

    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = fn
        out.requires_grad = True
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ==================================================================================================
# Elementwise
# ==================================================================================================
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive argument")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("sqrt: non-positive argument")
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ==================================================================================================
# Reductions
# ==================================================================================================
def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None,
         keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out, dtype=np.float64), (x,),
                 lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None,
         keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean: empty tensor")
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size / np.asarray(out).size
    return _make("mean", np.asarray(out, dtype=np.float64), (x,),
                 lambda g: (_expand(g, x.shape, axis, keepdims) / count,))


# ==================================================================================================
# Linear algebra
# ==================================================================================================
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """ [..., K] @ [K, M] -> [..., M] """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    k, m = b.shape

    def backward_fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward_fn)


def conv2d_same(x: ArrayLike, kernel: ArrayLike) -> Tensor:
    """
    Stride-1 2-d cross-correlation, channels-last, zero padding (k-1)/2.
    x: [N, H, W, C_in], kernel: [k, k, C_in, C_out] -> [N, H, W, C_out]
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_same: expected 4-d input and kernel, got {x.shape}, "
                         f"{kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"conv2d_same: kernel must be square with an odd size, got {kernel.shape}")
    if kernel.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d_same: {x.shape[3]} input channels, kernel expects "
                         f"{kernel.shape[2]}")
    n, h, w, _ = x.shape
    p = (k - 1) // 2

    def windows(data: np.ndarray) -> np.ndarray:
        padded = np.pad(data, ((0, 0), (p, p), (p, p), (0, 0)))
        return sliding_window_view(padded, (k, k), axis=(1, 2))  # [N, H, W, C_in, k, k]

    kernel_t = kernel.data.transpose(2, 0, 1, 3)  # [C_in, k, k, C_out]
    out = np.tensordot(windows(x.data), kernel_t, axes=([3, 4, 5], [0, 1, 2]))

    def backward_fn(g):
        gk = np.tensordot(windows(x.data), g, axes=([0, 1, 2], [0, 1, 2]))  # [C_in, k, k, C_out]
        dcols = np.tensordot(g, kernel_t, axes=([3], [3]))  # [N, H, W, C_in, k, k]
        gpad = np.zeros((n, h + 2 * p, w + 2 * p, x.shape[3]))
        for di in range(k):
            for dj in range(k):
                gpad[:, di:di + h, dj:dj + w, :] += dcols[..., di, dj]
        return gpad[:, p:p + h, p:p + w, :], gk.transpose(1, 2, 0, 3)

    return _make("conv2d_same", out, (x, kernel), backward_fn)


# ==================================================================================================
# Shape manipulation
# ==================================================================================================
def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _make("concat", out, tuple(ts), backward_fn)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {e}")
    ax = axis % out.ndim
    return _make("stack", out, tuple(ts),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


def slice_(x: ArrayLike, key) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data[key]
    except IndexError as e:
        raise ShapeError(f"slice: {e}")

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        if _is_basic_index(key):
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make("slice", np.array(out, dtype=np.float64), (x,), backward_fn)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int)) for p in parts)


def take(x: ArrayLike, indices: np.ndarray) -> Tensor:
    """ Gather from the flattened tensor """
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.size):
        raise ShapeError(f"take: index out of range for {x.size} elements")
    out = x.data.reshape(-1)[indices]

    def backward_fn(g):
        gx = np.bincount(indices.reshape(-1), weights=g.reshape(-1), minlength=x.size)
        return (gx.reshape(x.shape),)

    return _make("take", out, (x,), backward_fn)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}")
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


# ==================================================================================================
# Gradient checking
# ==================================================================================================
def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-6) -> float:
    """
    Compare the tape gradient of a scalar function with central finite differences.
    Returns max_i |analytic - numeric| / max(1, |analytic|).
    """
    point = Tensor(as_tensor(x).data, trainable=True, name="x")
    with Tape() as tape:
        value = f(point)
    analytic = tape.backward(value)[point]

    base = point.data.copy()
    numeric = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[i] = base[i] + eps
        upper = f(Tensor(shifted)).item()
        shifted[i] = base[i] - eps
        lower = f(Tensor(shifted)).item()
        numeric[i] = (upper - lower) / (2 * eps)

    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def parameters_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
