"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the network needs are provided. Every primitive accepts an
optional leading batch axis; the temporal/feature axis conventions follow the
network code (``[B, C, T]`` for convolutions, ``[..., d]`` for dense maps).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self, axis: int):
        return mean(self, axis)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass
class Tape:
    """Operations reachable from a loss, in topological (forward) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(n)] for n in self.nodes for p in n.parents)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    between steps.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)

        def fn_const(g):
            return (g * c,)

        return _result(a.data * c, (a,), fn_const, "scale")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _result(ad * bd, (a, b), fn, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), fn, "relu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs a generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), x.dtype)

    def fn(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), fn, "dropout")


def pointwise(x: Tensor, kind: str, rate: float = 0.0, rng=None, train: bool = False) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "dropout":
        return dropout(x, rate, rng, train)
    raise ConfigurationError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def fn(g):
        return (g.reshape(src),)

    return _result(x.data.reshape(shape), (x,), fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (g.transpose(inv),)

    return _result(x.data.transpose(axes), (x,), fn, "transpose")


def take(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] += g
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), fn, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn, "concat")


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    src = x.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return _result(x.data.mean(axis=axis), (x,), fn, "mean")


def sum_all(x: Tensor) -> Tensor:
    src = x.shape

    def fn(g):
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), fn, "sum")


# ---------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with identical leading axes (no broadcasting)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), fn, "matmul")


def dense_affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights + bias`` over the last axis of ``x``; weights are ``[d_in, d_out]``."""
    d_in, d_out = weights.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise ConfigurationError(
            f"dense_affine mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    xd, wd = x.data, weights.data
    lead = x.shape[:-1]

    def fn(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ wd.T).reshape(*lead, d_in)
        gw = xd.reshape(-1, d_in).T @ g2
        return gx, gw, g2.sum(axis=0)

    out = (xd.reshape(-1, d_in) @ wd + bias.data).reshape(*lead, d_out)
    return _result(out, (x, weights, bias), fn, "dense")


def conv1d_same(x: Tensor, weights: Tensor, bias: Tensor, groups: int = 1) -> Tensor:
    """Cross-correlation with zero "same" padding.

    ``x`` is ``[B, C_in, T]`` (or ``[C_in, T]``), ``weights`` ``[C_out, C_in/groups, k]``
    with odd ``k``. ``out[c, t] = bias[c] + sum_ij w[c, i, j] * x[i, t + j - (k-1)/2]``.
    """
    if x.ndim == 2:
        out = conv1d_same(reshape(x, (1,) + x.shape), weights, bias, groups)
        return reshape(out, out.shape[1:])
    if x.ndim != 3 or weights.ndim != 3:
        raise ConfigurationError(f"conv1d_same expects [B,C,T] input and [O,C,k] weights, got {x.shape}, {weights.shape}")
    B, C_in, T = x.shape
    C_out, C_g, k = weights.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_same needs an odd kernel, got {k}")
    if groups < 1 or C_in % groups or C_out % groups or C_in // groups != C_g:
        raise ConfigurationError(f"conv1d_same channel mismatch: input {x.shape}, weights {weights.shape}, groups {groups}")
    if bias.shape != (C_out,):
        raise ConfigurationError(f"conv1d_same bias shape {bias.shape} != ({C_out},)")
    G, O_g = groups, C_out // groups
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2)  # [B, C_in, T, k]
    # [G, B, T, C_g*k]
    X = cols.reshape(B, G, C_g, T, k).transpose(1, 0, 3, 2, 4).reshape(G, B * T, C_g * k)
    W = weights.data.reshape(G, O_g, C_g * k)
    Y = X @ W.transpose(0, 2, 1)  # [G, B*T, O_g]
    out = Y.reshape(G, B, T, O_g).transpose(1, 0, 3, 2).reshape(B, C_out, T) + bias.data[None, :, None]

    def fn(g):
        gY = g.reshape(B, G, O_g, T).transpose(1, 0, 3, 2).reshape(G, B * T, O_g)
        gW = (X.transpose(0, 2, 1) @ gY).transpose(0, 2, 1).reshape(C_out, C_g, k)
        gX = (gY @ W).reshape(G, B, T, C_g, k).transpose(1, 0, 3, 2, 4).reshape(B, C_in, T, k)
        gxp = np.zeros((B, C_in, T + 2 * pad), dtype=g.dtype)
        for j in range(k):
            gxp[:, :, j:j + T] += gX[..., j]
        return gxp[:, :, pad:pad + T], gW, g.sum(axis=(0, 2))

    return _result(np.ascontiguousarray(out), (x, weights, bias), fn, "conv1d")


def pool(x: Tensor, size: int, mode: str) -> Tensor:
    """Non-overlapping pooling over the last axis; the trailing remainder is dropped."""
    if size < 1:
        raise ConfigurationError(f"pool size must be >= 1, got {size}")
    if mode not in ("average", "max"):
        raise ConfigurationError(f"pool mode must be 'average' or 'max', got {mode!r}")
    if size == 1:
        return x
    T = x.shape[-1]
    n = T // size
    lead = x.shape[:-1]
    win = x.data[..., : n * size].reshape(*lead, n, size)
    dtype = x.dtype
    if mode == "average":
        def fn(g):
            full = np.zeros(x.shape, dtype=dtype)
            full[..., : n * size] = np.repeat(g / size, size, axis=-1)
            return (full,)

        return _result(win.mean(axis=-1), (x,), fn, "avgpool")

    idx = win.argmax(axis=-1)  # first index on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros(win.shape, dtype=dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        full = np.zeros(x.shape, dtype=dtype)
        full[..., : n * size] = gw.reshape(*lead, n * size)
        return (full,)

    return _result(out, (x,), fn, "maxpool")


# ---------------------------------------------------------------- normalisers


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, epsilon: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ConfigurationError(f"layer_norm affine shape mismatch for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(epsilon, x.dtype))
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        gxh = g * gd
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        g2, xh2 = g.reshape(-1, d), xhat.reshape(-1, d)
        return gx, (g2 * xh2).sum(axis=0), g2.sum(axis=0)

    return _result(xhat * gd + shift.data, (x, gain, shift), fn, "layernorm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise DataError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"label out of range [0, {K})")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    rows = np.arange(B)
    loss = (lse - logits.data[rows, labels]).mean()

    def fn(g):
        p = np.exp(logits.data - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), fn, "cross_entropy")


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-5,
    n_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``n_coords`` restricts the check to a seeded random subset of coordinates.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
