"""Dense tensors with reverse-mode automatic differentiation.

Every op records a closure mapping the output gradient to its inputs'
gradients. Elementwise ops accept one-directional broadcasting only (the
result has the shape of one operand, e.g. a bias or a per-row scale);
anything wider raises :class:`ShapeMismatch`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from ..core import FeedlocError, ShapeMismatch

_DTYPE = np.float32
_GRAD_ENABLED = True

_BCE_EPS = 1e-7
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class NumericFault(FeedlocError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class DisconnectedGraph(FeedlocError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DTYPE)
        if not np.all(np.isfinite(self.data)):
            raise NumericFault("non-finite values in leaf tensor")
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(x: np.ndarray) -> bool:
    # a single reduction is cheaper than an elementwise mask; confirm on the rare overflow
    return bool(np.isfinite(x.sum())) or bool(np.isfinite(x).all())


# finite inputs give finite outputs (and finite upstream grads give finite input grads), so the
# fault is already raised by whichever op produced the offending value
_FORWARD_SAFE = frozenset({"reshape", "transpose", "getitem", "concat", "neg", "relu", "sigmoid",
                           "tanh", "clamp", "abs", "softmax"})
_BACKWARD_SAFE = frozenset({"reshape", "transpose", "getitem", "concat", "neg", "relu", "sigmoid",
                            "tanh", "clamp", "abs"})


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if op not in _FORWARD_SAFE and not _finite(data):
        raise NumericFault(f"non-finite output from op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out.parents = parents if rg else ()
    out.backward_fn = backward_fn if rg else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeMismatch(f"{op}: two-sided broadcast {a.shape} x {b.shape} not allowed")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DisconnectedGraph("loss does not depend on any tensor requiring gradients")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if params is not None:
        for p in params:
            if id(p) not in seen:
                raise DisconnectedGraph(f"parameter {p!r} is not reachable from the loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgs = node.backward_fn(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            if node.op not in _BACKWARD_SAFE and not _finite(pg):
                raise NumericFault(f"non-finite gradient flowing out of op '{node.op}'")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = x.dtype.type(_SQRT_2_OVER_PI)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * (x + k * x2 * x))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * k * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _make(y.astype(x.dtype), (a,), bw, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# shape ops and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        ad, bd = a.data, b.data

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ np.ascontiguousarray(bd.T)).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        # one flat GEMM is faster than numpy's per-batch loop
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
        return _make(out, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g), "bmm")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[i] for i in axes]))
    inv = a.data.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)
    return _make(np.array(a.data[idx]), (a,), bw, "getitem")


# ---------------------------------------------------------------------------
# fused neural-net ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    n = xd.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeMismatch(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {n}")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx.astype(xd.dtype), (g * xhat).sum(axis=red), g.sum(axis=red)
    y = (xhat * gd + beta.data).astype(xd.dtype)
    return _make(y, (x, gamma, beta), bw, "layer_norm")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes; ``mask`` is additive."""
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[-2] != vd.shape[-2] or qd.shape[:-2] != kd.shape[:-2]:
        raise ShapeMismatch(f"attention: q {qd.shape}, k {kd.shape}, v {vd.shape}")
    sc = qd.dtype.type(1.0 / math.sqrt(qd.shape[-1]))
    s = (qd @ np.swapaxes(kd, -1, -2)) * sc
    if mask is not None:
        s = s + mask.astype(s.dtype)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv
    return _make(out, (q, k, v), bw, "attention")


def _mask_array(mask, like: np.ndarray) -> np.ndarray:
    if mask is None:
        return np.ones_like(like)
    m = np.asarray(mask, dtype=like.dtype)
    if m.shape != like.shape:
        raise ShapeMismatch(f"mask {m.shape} vs values {like.shape}")
    return m


def bce_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Masked mean binary cross-entropy on probabilities clamped to [1e-7, 1-1e-7]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    w = _mask_array(mask, pred.data)
    denom = w.sum()
    x = pred.data
    p = np.clip(x, _BCE_EPS, 1.0 - _BCE_EPS)
    if denom == 0:
        return _make(np.zeros((), dtype=x.dtype), (pred,), lambda g: (np.zeros_like(x),), "bce")
    per = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    loss = np.asarray((w * per).sum() / denom, dtype=x.dtype)
    inside = (x >= _BCE_EPS) & (x <= 1.0 - _BCE_EPS)

    def bw(g):
        d = (-t / p + (1.0 - t) / (1.0 - p)) * w / denom * inside
        return ((g * d).astype(x.dtype),)
    return _make(loss, (pred,), bw, "bce")


def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"mse_loss: pred {pred.shape} vs target {t.shape}")
    w = _mask_array(mask, pred.data)
    denom = w.sum()
    x = pred.data
    if denom == 0:
        return _make(np.zeros((), dtype=x.dtype), (pred,), lambda g: (np.zeros_like(x),), "mse")
    diff = x - t
    loss = np.asarray((w * diff * diff).sum() / denom, dtype=x.dtype)
    return _make(loss, (pred,), lambda g: ((g * 2.0 * diff * w / denom).astype(x.dtype),), "mse")


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"l1_loss: pred {pred.shape} vs target {t.shape}")
    w = _mask_array(mask, pred.data)
    denom = w.sum()
    x = pred.data
    if denom == 0:
        return _make(np.zeros((), dtype=x.dtype), (pred,), lambda g: (np.zeros_like(x),), "l1")
    diff = x - t
    loss = np.asarray((w * np.abs(diff)).sum() / denom, dtype=x.dtype)
    return _make(loss, (pred,), lambda g: ((g * np.sign(diff) * w / denom).astype(x.dtype),), "l1")
