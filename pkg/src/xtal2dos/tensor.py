"""A small dense-array reverse-mode autodiff engine on float64 numpy arrays.

Every differentiable operation creates a new ``Tensor`` that remembers its
parents and a closure mapping the output gradient to parent gradients.
Tensors carry a creation counter; creation order is a valid topological
order, so ``backward`` simply sorts the reachable nodes by it.

Elementwise binary operations accept a Python scalar or an array of the
*same* shape; nothing else broadcasts implicitly. Where a layer needs to
repeat a vector along an axis it calls ``expand`` so the summed gradient is
explicit on the tape.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

MASK_VALUE = -1e9  # added to masked attention logits; exp() of it underflows to 0.0

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_counter)

    # ---------------------------------------------------------------- basics
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
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    # -------------------------------------------------------------- backward
    def backward(self) -> None:
        """Reverse sweep from this scalar; leaf gradients accumulate."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for node in sorted(nodes, key=lambda t: t._id, reverse=True):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node._grad = g if node._grad is None else node._grad + g
                continue
            node._grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen.add(node._id)
        out.append(node)
        stack.extend(node._parents)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._grad = None
    out._id = next(_counter)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _binary_operands(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ShapeError(f"elementwise operands must share a shape: {a.shape} vs {b.shape}")
        return a, b
    if a_t:
        if np.ndim(b) != 0:
            raise ShapeError(f"elementwise operand must be a scalar or a Tensor of shape {a.shape}")
        return a, float(b)
    if np.ndim(a) != 0:
        raise ShapeError(f"elementwise operand must be a scalar or a Tensor of shape {b.shape}")
    return float(a), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        return _result(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _result(a + b.data, (b,), lambda g: (g,))
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        return _result(a.data - b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _result(a - b.data, (b,), lambda g: (-g,))
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(b, Tensor):
        return _result(a.data * b, (a,), lambda g: (g * b,))
    if not isinstance(a, Tensor):
        return _result(a * b.data, (b,), lambda g: (g * a,))
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, Tensor):
        if np.any(b.data == 0.0):
            raise DomainError("division by zero")
    elif b == 0.0:
        raise DomainError("division by zero")
    if not isinstance(b, Tensor):
        return _result(a.data / b, (a,), lambda g: (g / b,))
    bd = b.data
    if not isinstance(a, Tensor):
        out = a / bd
        return _result(out, (b,), lambda g: (-g * out / bd,))
    out = a.data / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value; clamp the input first")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _result(out, (a,), lambda g: (g * _sigmoid_np(x),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return _result(x * scale, (a,), lambda g: (g * scale,))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "linear": identity,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return _result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` n times along it."""
    data = np.expand_dims(a.data, axis)
    shape = list(data.shape)
    shape[axis] = n
    out = np.broadcast_to(data, shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=axis),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing only; views never alias duplicates."""
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (isinstance(it, (int, slice)) or it is None or it is Ellipsis):
            raise TypeError("Tensor indexing supports ints and slices; use gather_rows for index arrays")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _result(a.data[index], (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[index]`` for an integer array of any shape; gradient scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        flat = g.reshape(index.size, -1)
        summed = kernels.scatter_add_rows(flat, index.reshape(-1), shape[0])
        return (summed.reshape(shape),)

    return _result(a.data[index], (a,), backward)


def segment_sum(a: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id; result has n rows."""
    segments = np.asarray(segments, dtype=np.int64)
    shape = a.shape
    out = kernels.scatter_add_rows(a.data.reshape(shape[0], -1), segments, n)
    return _result(out.reshape((n,) + shape[1:]), (a,), lambda g: (g[segments],))


def segment_softmax(logits: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Softmax over the rows of ``logits`` grouped by segment id, per column."""
    segments = np.asarray(segments, dtype=np.int64)
    shape = logits.shape
    flat = logits.data.reshape(shape[0], -1)
    out = kernels.segment_softmax(flat, segments, n)

    def backward(g):
        gx = kernels.segment_softmax_backward(out, g.reshape(out.shape), segments, n)
        return (gx.reshape(shape),)

    return _result(out.reshape(shape), (logits,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g2 @ wd).reshape(lead + (wd.shape[1],))
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ---------------------------------------------------------------- softmax & attention


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(a.data, axis)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention, softmax(q k^T / sqrt(d) + mask) v.

    q is (..., Tq, d), k and v are (..., Tk, d). ``mask`` is an additive
    constant broadcastable to (..., Tq, Tk): 0 where allowed, MASK_VALUE where
    not. Returns the output tensor and the attention weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    scores = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    weights = _softmax_np(scores, -1)
    out = weights @ vd

    def backward(g):
        gv = np.swapaxes(weights, -1, -2) @ g
        gw = g @ np.swapaxes(vd, -1, -2)
        gs = weights * (gw - np.sum(gw * weights, axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _result(out, (q, k, v), backward), weights


# ---------------------------------------------------------------- normalization

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward)


class BatchNormState:
    """Running moments for one batch-norm site (mutated in train mode)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState,
               training: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Normalize each column of a (batch, d) array.

    Train mode uses the biased batch variance for normalization and folds
    the unbiased variance into the running estimate; eval mode uses the
    running moments only.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (batch, d), got {x.shape}")
    n = x.shape[0]
    xd, gd = x.data, gain.data
    if not training:
        inv = 1.0 / np.sqrt(state.var + eps)
        out = (xd - state.mean) * inv * gd + bias.data

        def backward_eval(g):
            return g * inv * gd, (g * (xd - state.mean) * inv).sum(axis=0), g.sum(axis=0)

        return _result(out, (x, gain, bias), backward_eval)

    if n < 2:
        raise ShapeError("batch_norm in train mode needs a batch of at least 2")
    mu = xd.mean(axis=0)
    xc = xd - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bias.data
    state.mean = (1.0 - momentum) * state.mean + momentum * mu
    state.var = (1.0 - momentum) * state.var + momentum * var * n / (n - 1)

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=0) - xhat * (gx_hat * xhat).mean(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- helpers


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
