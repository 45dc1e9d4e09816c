"""Dense float tensors with reverse-mode autodiff.

Every operation records itself on a dynamic graph (rebuilt each step) when
any input requires gradients; otherwise it returns a plain detached tensor,
so inference paths pay no tape overhead. Broadcasting follows numpy rules
and gradients are sum-reduced back over broadcast axes. Training runs in
float32; passing float64 arrays everywhere gives the replay path used for
finite-difference verification.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """A numpy array plus an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same data, off the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into .grad buffers."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = pending.get(id(parent))
                pending[id(parent)] = pg if acc is None else acc + pg

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the graph (graphs can be deep for long sequences)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the pre-broadcast shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast("add", a, b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast("sub", a, b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast("mul", a, b)

    def backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        # Batched form requires equal batch dims; broadcasting here is a
        # shape bug in a model, not a convenience worth supporting.
        if not (a.data.ndim == 2 and b.data.ndim == 2):
            raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")

    def backward(grad):
        ga = grad @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ grad
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def log(a: Tensor) -> Tensor:
    def backward(grad):
        return (grad / a.data,)

    return _node(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(grad):
        return (grad * out_data,)

    return _node(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(grad):
        return (grad * (1.0 - out_data * out_data),)

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype)

    def backward(grad):
        return (grad * out_data * (1.0 - out_data),)

    return _node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(grad):
        return (grad * (a.data > 0),)

    return _node(np.maximum(a.data, 0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def backward(grad):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow; d/dx = sigmoid(x)."""
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    out_data = out_data.astype(x.dtype)

    def backward(grad):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (grad * s.astype(x.dtype),)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape

    def backward(grad):
        return (grad.reshape(old_shape),)

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward(grad):
        return (grad.transpose(inverse),)

    return _node(a.data.transpose(axes), (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Indexing
# ---------------------------------------------------------------------------


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of `weight`; gradient scatter-adds back into the table."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ValueError(f"embedding: id out of range for table of {weight.shape[0]} rows")

    def backward(grad):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, grad)
        return (gw,)

    return _node(weight.data[idx], (weight,), backward)


def gather_last(a: Tensor, ids) -> Tensor:
    """out[..., i] = a[..., i, ids[i]] — pick one entry per row of the last axis."""
    idx = np.asarray(ids, dtype=np.intp)
    if a.data.ndim != 2:
        raise ValueError(f"gather_last: expected 2-D input, got shape {a.shape}")
    if idx.shape != (a.shape[0],):
        raise ValueError(f"gather_last: need one index per row, got {idx.shape} for {a.shape}")
    rows = np.arange(a.shape[0])

    def backward(grad):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = grad
        return (ga,)

    return _node(a.data[rows, idx], (a,), backward)


# ---------------------------------------------------------------------------
# Reductions & normalization
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    def backward(grad):
        if axis is None:
            return (np.broadcast_to(grad, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, axis), a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def backward(grad):
        if axis is None:
            return (np.broadcast_to(grad / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, axis) / n, a.shape).copy(),)

    return _node(a.data.mean(axis=axis), (a,), backward)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first maximal entry (ties -> lowest index)."""
    out_data = a.data.max(axis=axis)
    argmax = a.data.argmax(axis=axis)

    def backward(grad):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(argmax, axis), np.expand_dims(grad, axis), axis=axis)
        return (ga,)

    return _node(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        dot = (grad * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (grad - dot),)

    return _node(out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(grad):
        return (grad - probs * grad.sum(axis=axis, keepdims=True),)

    return _node(out_data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine. Zero-variance rows land on the bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(grad):
        dxhat = grad * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(grad.ndim - 1))
        dgain = (grad * xhat).sum(axis=lead)
        dbias = grad.sum(axis=lead)
        return dx.astype(x.data.dtype), dgain, dbias

    return _node(out_data.astype(x.data.dtype), (x, gain, bias), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set entries where `mask` is true to `value`; their gradient is dropped."""
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast("masked_fill", a, Tensor(mask.astype(a.data.dtype)))
    full_mask = np.broadcast_to(mask, a.shape)

    def backward(grad):
        return (np.where(full_mask, 0.0, grad).astype(a.data.dtype),)

    return _node(np.where(full_mask, a.data.dtype.type(value), a.data), (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)

    def backward(grad):
        return (grad * keep,)

    return _node(a.data * keep, (a,), backward)


# ---------------------------------------------------------------------------
# Pooling over the sequence (first) axis
# ---------------------------------------------------------------------------


def max_pool_time(a: Tensor) -> Tensor:
    """(T, d) -> (d,) max over time."""
    return reduce_max(a, axis=0)


def avg_pool_time(a: Tensor) -> Tensor:
    """(T, d) -> (d,) mean over time."""
    return mean(a, axis=0)
