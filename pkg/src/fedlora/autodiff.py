"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations append a record to the calling thread's current
:class:`ComputeGraph` whenever one of their operands requires a gradient.
:func:`backward` walks that tape once, in reverse, and then marks it
consumed; the next recorded operation starts a fresh graph.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    GraphStateError,
    NumericError,
    ShapeError,
    TargetIndexError,
)

__all__ = [
    "Tensor",
    "ComputeGraph",
    "current_graph",
    "reset_graph",
    "no_grad",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "transpose",
    "reshape",
    "embedding",
    "layer_norm",
    "gelu",
    "softmax",
    "softmax_cross_entropy",
    "masked_cross_entropy",
    "take_rows",
    "concat",
    "slice_axis",
    "tsum",
    "tmean",
    "tabs",
    "finite_diff_check",
]

_local = threading.local()


class ComputeGraph:
    """Ordered tape of recorded operations for one forward evaluation."""

    __slots__ = ("records", "consumed")

    def __init__(self):
        self.records: list[tuple[tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


def current_graph() -> ComputeGraph:
    g = getattr(_local, "graph", None)
    if g is None or g.consumed:
        g = ComputeGraph()
        _local.graph = g
    return g


def reset_graph() -> None:
    """Discard the current thread's graph without running backward."""
    g = getattr(_local, "graph", None)
    if g is not None:
        g.consumed = True
        g.records = []
    _local.graph = None


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _check_finite(arr: np.ndarray) -> None:
    # a single reduction propagates any NaN/inf without a boolean temporary
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value produced")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = None

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bw: Callable) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        graph = current_graph()
        for p in parents:
            if p._node is not None and p._node[0] is not graph:
                raise GraphStateError("operand belongs to a consumed graph; detach() it first")
        out.requires_grad = True
        out._node = (graph, len(graph.records))
        graph.records.append((parents, bw))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; callers zero them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise GraphStateError("loss is not attached to a live graph")
    graph, idx = node
    if graph.consumed:
        raise GraphStateError("graph already consumed by a previous backward")
    records = graph.records
    grads: list[np.ndarray | None] = [None] * (idx + 1)
    grads[idx] = np.ones_like(loss.data)
    for i in range(idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        parents, fn = records[i]
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            pn = p._node
            if pn is None:
                _accumulate_leaf(p, pg)
            else:
                j = pn[1]
                grads[j] = pg if grads[j] is None else grads[j] + pg
    graph.consumed = True
    graph.records = []
    if getattr(_local, "graph", None) is graph:
        _local.graph = None


def _accumulate_leaf(p: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(p.data.shape)
    if p.grad is None:
        p.grad = g.copy()
    else:
        p.grad = p.grad + g


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-D and shared."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), bw)


def _broadcast_pair(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim <= b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            -_unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (trailing-axis broadcasting only)."""
    _broadcast_pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 dimensions")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TargetIndexError("embedding id out of range")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = 1.0 + 0.044715 * x2
    inner *= xd
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5(1+t) + 0.5 x (1-t^2) C (1 + 3k x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= xd
        d *= 1.0 - t * t
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return _result(out, (x,), bw)


_causal_cache: dict[tuple[int, int], np.ndarray] = {}


def _causal_bias(n_q: int, n_k: int) -> np.ndarray:
    key = (n_q, n_k)
    m = _causal_cache.get(key)
    if m is None:
        m = np.where(np.triu(np.ones((n_q, n_k), dtype=bool), k=1 + n_k - n_q), -np.inf, 0.0)
        _causal_cache[key] = m
    return m


def softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` zeroes entries with key > query."""
    s = x.data + _causal_bias(*x.shape[-2:]) if causal else x.data.copy()
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        gp = g * p
        gp -= p * gp.sum(axis=-1, keepdims=True)
        return (gp,)

    return _result(p, (x,), bw)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    out = z - z.max(axis=-1, keepdims=True)
    out -= np.log(np.exp(out).sum(axis=-1, keepdims=True))
    return out


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError("softmax_cross_entropy expects a 1-D logit vector")
    v = logits.shape[0]
    if not 0 <= int(target) < v:
        raise TargetIndexError(f"target {target} outside [0, {v})")
    target = int(target)
    logp = _log_softmax(logits.data)

    def bw(g):
        grad = np.exp(logp)
        grad[target] -= 1.0
        return (grad * g,)

    return _result(np.asarray(-logp[target]), (logits,), bw)


def masked_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted mean of token negative log-likelihoods.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``weights`` share the
    leading shape. The result is ``sum(w * nll) / sum(w)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or weights.shape != targets.shape:
        raise ShapeError("targets/weights must match the leading logit shape")
    total = weights.sum()
    if total <= 0:
        raise ContractError("no positions carry loss weight")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise TargetIndexError("target id out of range")
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = weights.reshape(-1)
    logp = _log_softmax(z)
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    loss = np.asarray((w * nll).sum() / total)

    def bw(g):
        grad = np.exp(logp, out=logp)
        grad[rows, t] -= 1.0
        grad *= (w * (float(g) / total))[:, None]
        return (grad.reshape(logits.shape),)

    return _result(loss, (logits,), bw)


def take_rows(x: Tensor, rows) -> Tensor:
    """Select rows ``x[rows]`` along the first axis."""
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return _result(x.data[rows], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, bw)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(x.data[idx].copy(), (x,), bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    out = x.data.sum(axis=axis)
    return _result(
        out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def tabs(x: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is 0."""
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


# ---------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument closure over ``params`` returning a scalar
    tensor. Up to ``n_samples`` coordinates (all of them when None) are
    probed; the error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        p.zero_grad()
    reset_graph()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("f returned a non-finite value")
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]

    sizes = [p.size for p in plist]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if n_samples is None or n_samples >= total:
        picks = np.arange(total)
    else:
        picks = rng.choice(total, size=n_samples, replace=False)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = int(flat - offsets[k])
            view = plist[k].data.reshape(-1)
            orig = view[local]
            view[local] = orig + eps
            fp = float(f().data)
            view[local] = orig - eps
            fm = float(f().data)
            view[local] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("f returned a non-finite value")
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[k].reshape(-1)[local])
            err = abs(ana - num) / max(1e-12, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst
