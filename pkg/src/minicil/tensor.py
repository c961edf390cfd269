"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every differentiable op links its output to its parents,
and ``backward`` replays the recorded graph once in reverse topological
order. Tensors with ``requires_grad=False`` act as constants; subgraphs
built purely from constants record nothing.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 n-d array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph plumbing -------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar; fills .grad on reached leaves."""
        if self.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo_order(self)):
            if node._backward is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(root: Tensor) -> list:
    """Nodes of the recorded graph, parents before children, each once."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict) -> dict:
    """Gradients of a scalar loss keyed by parameter name.

    Parameters absent from the loss graph (or frozen) get zero gradients.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# -- elementwise ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad, b.data.shape))

        return run

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-out.grad, b.data.shape))

        return run

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Hadamard product (broadcasting); also covers scaling by a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

        return run

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

        return run

    return _make(a.data / b.data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * exponent * a.data ** (exponent - 1.0))

        return run

    return _make(a.data ** exponent, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * data)

        return run

    return _make(data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad / a.data)

        return run

    return _make(np.log(a.data), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad * mask)

        return run

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


# -- reductions and shape ops ---------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(g, a.data.shape).copy())

        return run

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(g, a.data.shape) / count)

        return run

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad.reshape(a.data.shape))

        return run

    return _make(a.data.reshape(shape), (a,), bw)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(out.grad.swapaxes(ax1, ax2))

        return run

    return _make(a.data.swapaxes(ax1, ax2), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(out):
        def run():
            pieces = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t.accumulate(g)

        return run

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def index(a, key) -> Tensor:
    """Basic slicing / integer-array indexing; backward scatters into zeros."""
    a = as_tensor(a)
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in parts)

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                if fancy:
                    np.add.at(g, key, out.grad)
                else:
                    g[key] += out.grad
                a.accumulate(g)

        return run

    return _make(a.data[key], (a,), bw)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim < 1 or (idx.size and idx.max() >= a.data.shape[0]):
        raise DimensionError(
            f"take_rows: index max {idx.max() if idx.size else '-'} out of range "
            f"for shape {a.data.shape}"
        )

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g, idx, out.grad)
                a.accumulate(g)

        return run

    return _make(a.data[idx], (a,), bw)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul requires 2-d or batched operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )

    def bw(out):
        def run():
            if a.requires_grad:
                ga = out.grad @ b.data.swapaxes(-1, -2)
                a.accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ out.grad
                b.accumulate(_unbroadcast(gb, b.data.shape))

        return run

    return _make(a.data @ b.data, (a, b), bw)


# -- fused numerically-stable ops ------------------------------------------


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate(np.expand_dims(out.grad, axis) * soft)

        return run

    return _make(data, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            if a.requires_grad:
                inner = (out.grad * p).sum(axis=axis, keepdims=True)
                a.accumulate(p * (out.grad - inner))

        return run

    return _make(p, (a,), bw)


# -- composed ops used throughout the models --------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    if np.any(sq.data == 0.0):
        raise DegenerateInputError("l2_normalize: zero vector")
    return mul(x, power(sq, -0.5))


def cosine_similarity(a, b) -> Tensor:
    """cos angle between two 1-d vectors, in [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError(
            f"cosine_similarity expects vectors, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"cosine_similarity: shapes {a.data.shape} and {b.data.shape} differ"
        )
    na = tsum(mul(a, a))
    nb = tsum(mul(b, b))
    if na.data == 0.0 or nb.data == 0.0:
        raise DegenerateInputError("cosine_similarity: zero vector")
    return mul(tsum(mul(a, b)), power(mul(na, nb), -0.5))
