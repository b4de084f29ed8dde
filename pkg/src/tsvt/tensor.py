"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a contiguous numpy float64 array. Forward ops record
their inputs and a backward rule on the output node; calling
:func:`backward` on a scalar replays those rules in reverse topological
order. Gradients accumulate into ``.grad`` of ``requires_grad`` leaves
until the caller zeroes them.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ParameterError(ValueError):
    """An op parameter is outside its valid range."""


class UsageError(RuntimeError):
    """The autodiff API was called in an unsupported way."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # graph bookkeeping ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_rule):
        out = Tensor(data)
        track = any(p.requires_grad or p._parents for p in parents)
        if track:
            out._parents = tuple(parents)
            out._backward = backward_rule
        return out

    # operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(t) into every reachable requires_grad tensor.

    Gradients accumulate; the caller is responsible for zeroing between
    optimization steps.
    """
    if loss.data.size != 1:
        raise UsageError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    # iterative topological sort (graphs can be deeper than the recursion limit)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.copy() if pg.base is not None else pg
            else:
                acc += pg


# elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._result(data, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def rule(g):
        return (g * s,)

    return Tensor._result(data, (a,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def rule(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        return (g * dgelu,)

    return Tensor._result(data, (x,), rule)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-p) at train time, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return reshape(x, x.data.shape)  # identity node, keeps the graph uniform
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    data = x.data * keep

    def rule(g):
        return (g * keep,)

    return Tensor._result(data, (x,), rule)


# shape / structure ----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.data.shape),)

    return Tensor._result(data, (x,), rule)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = np.transpose(x.data, axes)

    def rule(g):
        return (np.transpose(g, inv),)

    return Tensor._result(data, (x,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(data, tensors, rule)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return Tensor._result(data, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / count,)

    return Tensor._result(data, (x,), rule)


# linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}"
        )
    data = a.data @ b.data

    def rule(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._result(data, (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with b broadcast over leading axes."""
    return add(matmul(x, w), b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise ParameterError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._result(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def rule(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        flat_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=flat_axes)
        gbias = g.sum(axis=flat_axes)
        return gx, ggain, gbias

    return Tensor._result(data, (x, gain, bias), rule)


def take_token(x: Tensor, index: int) -> Tensor:
    """Select one row along the token axis (second to last)."""
    data = x.data[..., index, :]

    def rule(g):
        full = np.zeros_like(x.data)
        full[..., index, :] = g
        return (full,)

    return Tensor._result(data, (x,), rule)


def pool_tokens(x: Tensor, stride: int) -> Tensor:
    """Strided mean-pooling over the token axis (second to last).

    Produces ceil(L / stride) rows; a short trailing group is averaged
    over its actual size.
    """
    if stride < 1:
        raise ParameterError(f"pool stride must be >= 1, got {stride}")
    if stride == 1:
        return reshape(x, x.data.shape)
    length = x.data.shape[-2]
    starts = np.arange(0, length, stride)
    counts = np.minimum(starts + stride, length) - starts
    pooled = np.add.reduceat(x.data, starts, axis=-2) / counts[:, None]

    def rule(g):
        g_per = g / counts[:, None]
        return (np.repeat(g_per, counts, axis=-2),)

    return Tensor._result(pooled, (x,), rule)
