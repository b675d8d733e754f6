"""Dense tensors with define-by-run reverse-mode differentiation.

Every op creates a new :class:`Tensor` that remembers its inputs and a local
gradient rule. Node ids grow monotonically, so sorting reachable nodes by id
gives a valid topological order for the backward sweep.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}

_node_counter = itertools.count()
_state = {"dtype": np.float32}


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """Raised for undefined numerical cases (zero vectors, empty masks, NaNs)."""


def resolve_dtype(precision) -> type:
    if isinstance(precision, str):
        try:
            return _DTYPES[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None
    return np.dtype(precision).type


def default_dtype() -> type:
    return _state["dtype"]


def set_default_dtype(precision) -> None:
    _state["dtype"] = resolve_dtype(precision)


@contextmanager
def precision(p):
    old = _state["dtype"]
    _state["dtype"] = resolve_dtype(p)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = old


def is_grad_enabled() -> bool:
    return _grad_mode.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data if data.dtype.kind == "f" else data.astype(default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    # op outputs skip __init__'s dtype coercion; data is already a float array
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_counter)
    out.name = None
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


# --- backward ---------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every node reachable from ``loss``.

    Leaf gradients accumulate across calls (zero them between steps);
    intermediate gradients are overwritten.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any trainable tensor")

    seen = {loss.node_id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                seen[p.node_id] = p
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(seen, reverse=True):
        node = seen[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# --- helpers ----------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_leading_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # only leading batch extents may differ; trailing extents must agree
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dimensions")


# --- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, accumulated left to right."""
    if not xs:
        raise ValueError("add_n needs at least one tensor")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"add_n: shapes {shape} and {x.shape} differ")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return _make(out, tuple(xs), lambda g: (g,) * len(xs))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(x.data * pos, (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    # split by sign so exp never overflows
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


# --- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(np.argsort(axes)),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ValueError("concat needs at least one tensor")
    nd = xs[0].ndim
    ax = axis % nd
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in xs]} disagree off-axis")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, -1)


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {x.shape} differ")
    ax = axis % (len(shape) + 1)
    n = len(xs)
    return _make(np.stack([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.data.dtype

    def rule(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of {vocab}")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), rule)


# --- reductions -------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape
    return _make(x.data.mean(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over positions where ``mask`` is true."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    n = int(mask.sum())
    if n == 0:
        raise NumericalError("masked_mean over an empty mask")
    w = mask.astype(x.data.dtype) / n
    return _make(np.asarray((x.data * w).sum(), dtype=x.data.dtype), (x,), lambda g: (g * w,))


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: shapes {sa} and {sb} are not aligned")
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            if bd.ndim == 2:
                # fold batch dims into one big product instead of summing per batch
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {sa} and {sb} do not broadcast") from None
    return _make(out, (a, b), rule)


def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is false get exactly 0."""
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            xd = np.where(mask, xd, -np.inf)
        except ValueError:
            raise DimensionError(f"softmax mask {mask.shape} does not broadcast to {x.shape}") from None
        if xd.shape != x.shape:
            raise DimensionError(f"softmax mask {mask.shape} does not broadcast to {x.shape}")
    m = xd.max(axis=-1, keepdims=True)
    if mask is not None and np.isneginf(m).any():
        raise NumericalError("softmax row with every position masked")
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    r = 1.0 / d
    xc = xd - xd.sum(axis=-1, keepdims=True) * r
    var = (xc * xc).sum(axis=-1, keepdims=True) * r
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) * r
                    - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * r))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), rule)


# --- losses and similarities --------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over positions where ``pad_mask`` is true (true = real token)."""
    x = logits.data
    V = x.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != x.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {x.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range for {V} classes")
    valid = np.ones(targets.shape, bool) if pad_mask is None else np.asarray(pad_mask, bool)
    n = int(valid.sum())
    if n == 0:
        raise NumericalError("cross_entropy with every position masked")
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n

    def rule(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1, -1)
        return (p * (valid[..., None] * (g / n)).astype(x.dtype),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), rule)


def cosine_squared_rows(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cos^2 over the last axis: (u.v)^2 / (|u|^2 |v|^2)."""
    if u.shape != v.shape:
        raise DimensionError(f"cosine_squared: shapes {u.shape} and {v.shape} differ")
    ud, vd = u.data, v.data
    p = (ud * vd).sum(-1)
    a = (ud * ud).sum(-1)
    b = (vd * vd).sum(-1)
    if (a == 0).any() or (b == 0).any():
        raise NumericalError("cosine of a zero vector is undefined")
    c = p * p / (a * b)

    def rule(g):
        k = (2 * g * p / (a * b))[..., None]
        gu = k * (vd - (p / a)[..., None] * ud)
        gv = k * (ud - (p / b)[..., None] * vd)
        return gu, gv

    return _make(c, (u, v), rule)


def cosine_squared(u: Tensor, v: Tensor) -> Tensor:
    if u.ndim != 1:
        raise DimensionError(f"cosine_squared expects vectors, got shape {u.shape}")
    return cosine_squared_rows(u, v)
