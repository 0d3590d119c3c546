"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh node that remembers its parents and a closure that
pushes the upstream gradient back to them.  ``backward`` walks the graph in
reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
CHECK_FINITE = True
# grad mode is per thread: evaluation runs generation on worker threads, and a
# shared flag saved/restored by overlapping no_grad blocks can be left off
_GRAD_MODE = threading.local()


def grad_enabled() -> bool:
    return getattr(_GRAD_MODE, "enabled", True)


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


@contextlib.contextmanager
def no_grad():
    """Inside this block ops record no parents, so no graph is kept alive."""
    prev = grad_enabled()
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan when it is not
    if CHECK_FINITE and not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # grads are never mutated in place, so sharing the incoming array is safe
    t.grad = g if t.grad is None else t.grad + g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _make(out, (x,), "exp", bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), "log", bw)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        _accum(x, g * 0.5 / out)

    return _make(out, (x,), "sqrt", bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - out * out))

    return _make(out, (x,), "tanh", bw)


def relu(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), "relu", bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, so finite differences behave
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return _make(out, (x,), "gelu", bw)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", bw)


# -- reductions and shape ops --------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), "transpose", bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)

    return _make(np.array(x.data[idx]), (x,), "index", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, full)

    return _make(table.data[ids], (table,), "embedding", bw)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    # (..., k) @ (k, n) runs as one flat GEMM instead of a stack of small ones
    flat = a.ndim > 2 and b.ndim == 2
    try:
        if flat:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            if flat:
                _accum(a, (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape))
            else:
                _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accum(b, gb)

    return _make(out, (a, b), "matmul", bw)


# -- fused numerics -------------------------------------------------------
def _softmax_np(x: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        # masked entries never influence unmasked outputs, not even via the max
        z = x + np.where(mask, 0.0, -np.inf)
        e = np.exp(z - z.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax.  ``mask`` (bool, broadcastable) marks allowed entries;
    every slice along ``axis`` must keep at least one."""
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    p = _softmax_np(x.data, axis, mask)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), "log_softmax", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last extent >= 2, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, rstd * (gx - gx.mean(axis=-1, keepdims=True)
                              - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), "layer_norm", bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over unmasked rows.

    ``logits`` is (..., V); ``targets`` and ``mask`` share the leading shape.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is masked")
    bad = m & ((t < 0) | (t >= v))
    if bad.any():
        raise ValueError(f"cross_entropy: target {int(t[bad][0])} out of range [0, {v})")
    tt = np.where(m, t, 0)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(flat.shape[0])
    loss = -(logp[rows, tt] * m).sum() / n

    def bw(g):
        p = np.exp(logp)
        p[rows, tt] -= 1.0
        p *= (m / n)[:, None]
        _accum(logits, (g * p).reshape(logits.shape))

    return _make(np.asarray(loss), (logits,), "cross_entropy", bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy, computed stably from raw logits."""
    y = np.asarray(targets, dtype=np.float64)
    x = logits.data
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()

    def bw(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        _accum(logits, g * (p - y) / x.size)

    return _make(np.asarray(loss), (logits,), "bce_with_logits", bw)


# -- graph ----------------------------------------------------------------
@dataclass
class ComputeGraph:
    """Nodes reachable from an output, parents before consumers."""

    nodes: list[Tensor]

    def index_of(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}

    def edges(self) -> list[tuple[int, int]]:
        pos = self.index_of()
        return [(pos[id(p)], i) for i, n in enumerate(self.nodes) for p in n._parents]


def trace(output: Tensor) -> ComputeGraph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
    return ComputeGraph(order)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        # route parent contributions through a scratch dict instead of .grad
        parents = list({id(p): p for p in node._parents}.values())
        saved = [p.grad for p in parents]
        for p in parents:
            p.grad = None
        node._backward(g)
        for p, old in zip(parents, saved):
            if p.grad is not None:
                gid = id(p)
                grads[gid] = grads[gid] + p.grad if gid in grads else p.grad
            p.grad = old


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
