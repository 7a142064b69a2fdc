"""A small reverse-mode autodiff tensor over float64 numpy arrays.

Only the operations the model needs are provided. Several of them are fused
(dense, layernorm, masked softmax, the losses) so a forward pass creates few
graph nodes; the per-node Python overhead dominates at this scale.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Sequence

import numpy as np

_state = {"grad": True, "check_finite": True}


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class GraphError(RuntimeError):
    """Backward was requested on something that cannot be differentiated."""


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def set_finite_checks(enabled: bool) -> None:
    _state["check_finite"] = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.op = "leaf"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if _state["check_finite"] and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.requires_grad = True
    else:
        out.parents = ()
        out.backward_fn = None
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward before forward: tensor has no recorded graph to differentiate")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node.grad += g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with inputs clamped below at ``floor`` (zero gradient there)."""
    x = a.data
    xc = np.maximum(x, floor)
    live = x > floor
    return _make(np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),), "log")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(y, (a,), bw, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _make(np.array(a.data[idx]), (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ("ids out of range",))
    shape = table.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (z,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- fused layers

def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ W + b over the last axis of ``x``; ``W`` has shape (in, out)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise ShapeError("dense", x.shape, W.shape, () if b is None else b.shape)
    xd, Wd = x.data, W.data
    n_in, n_out = Wd.shape
    x2 = xd.reshape(-1, n_in)
    out = x2 @ Wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (n_out,))

    def bw(g):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ Wd.T).reshape(xd.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw, "dense")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        H = gamma.shape[0]
        g2 = g.reshape(-1, H)
        ggamma = (g2 * xhat.reshape(-1, H)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable, True = keep) zeroes entries."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def mean_pool(seq: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over axis 1 of a (B, L, H) sequence, optionally over valid positions only."""
    if seq.ndim != 3:
        raise ShapeError("mean_pool", seq.shape)
    if mask is None:
        return tmean(seq, axis=1)
    w = mask.astype(np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    return tsum(mul(seq, w[:, :, None]), axis=1)


def cross_attention(query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    Shapes (..., Lq, d), (..., Lk, d), (..., Lk, dv); ``mask`` broadcastable to
    (..., Lq, Lk) with True marking attendable keys.
    """
    if query.shape[-1] != keys.shape[-1] or keys.shape[-2] != values.shape[-2]:
        raise ShapeError("cross_attention", query.shape, keys.shape, values.shape)
    scale = 1.0 / np.sqrt(query.shape[-1])
    scores = mul(matmul(query, transpose(keys, _swap_last(keys.ndim))), scale)
    return matmul(softmax(scores, axis=-1, mask=mask), values)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------- losses

PROB_FLOOR = 1e-12


def bce_loss(p: Tensor, y) -> Tensor:
    """Elementwise binary cross-entropy on probabilities (clamped to [1e-12, 1-1e-12])."""
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.shape)
    pd = p.data
    pc = np.clip(pd, PROB_FLOOR, 1.0 - PROB_FLOOR)
    live = (pd > PROB_FLOOR) & (pd < 1.0 - PROB_FLOOR)
    out = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))

    def bw(g):
        return (np.where(live, g * ((1.0 - y) / (1.0 - pc) - y / pc), 0.0),)

    return _make(out, (p,), bw, "bce")


def ntp_loss(dists: Tensor, targets, mask=None) -> Tensor:
    """Mean over steps of -ln p(target); one value per sequence.

    ``dists`` has shape (..., L, V), ``targets`` (..., L) integer ids and
    ``mask`` (..., L) marks the steps that count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != dists.shape[:-1]:
        raise ShapeError("ntp_loss", dists.shape, targets.shape)
    V = dists.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError("ntp_loss: target id outside vocabulary")
    m = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    n = m.sum(axis=-1)
    if targets.shape[-1] == 0 or np.any(n == 0):
        raise ValueError("ntp_loss: empty target sequence")
    onehot = targets[..., None] == np.arange(V)
    picked = (dists.data * onehot).sum(axis=-1)
    pc = np.maximum(picked, PROB_FLOOR)
    out = -(np.log(pc) * m).sum(axis=-1) / n

    def bw(g):
        coef = np.where(picked > PROB_FLOOR, -m / (pc * n[..., None]), 0.0) * np.expand_dims(g, -1)
        return (onehot * coef[..., None],)

    return _make(out, (dists,), bw, "ntp")
