"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like) operands, computes the
forward value with numpy and registers the matching vector-Jacobian product.
Leading dimensions broadcast the way numpy does; gradients are summed back
to each operand's own shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from msgl.autograd.random import RngStream
from msgl.autograd.tensor import Tensor, as_tensor, make_result
from msgl.errors import ConfigurationError, DimensionError, UsageError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(_binary(np.add, a, b, "add"), (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(_binary(np.subtract, a, b, "sub"), (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(_binary(np.multiply, a, b, "mul"), (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        out = _binary(np.divide, a, b, "div")
    return make_result(out, (a, b), backward, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_result(out, (x,), lambda g: (g / x.data,), "log")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# --------------------------------------------------------------------- shape ops

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, dtype=x.data.dtype), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = -2) -> Tensor:
    """Join along ``axis`` (counted from the end); other leading axes broadcast."""
    if axis >= 0:
        raise UsageError("concat takes a negative axis so operands of different rank line up")
    tensors = [as_tensor(t) for t in tensors]
    tail = -axis - 1
    try:
        lead = np.broadcast_shapes(*[t.shape[:axis] for t in tensors])
        trailing = {t.shape[len(t.shape) - tail:] if tail else () for t in tensors}
        if len(trailing) != 1:
            raise ValueError
        parts = [np.broadcast_to(t.data, lead + t.shape[axis:]) for t in tensors]
        out = np.concatenate(parts, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(_unbroadcast(pc, t.shape) for pc, t in zip(pieces, tensors))

    return make_result(out, tensors, backward, "concat")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.data.dtype), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --------------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (fan_in, fan_out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def masked_softmax(x, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where ``allowed == False`` entries get exactly zero weight."""
    x = as_tensor(x)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    if not allowed.any(axis=axis).all():
        raise UsageError("masked_softmax: a slice has no permitted position")
    masked = np.where(allowed, x.data, -np.inf)
    shifted = masked - masked.max(axis=axis, keepdims=True)
    e = np.where(allowed, np.exp(shifted), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward, "masked_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape[-1:] != (d,) or beta.shape[-1:] != (d,):
        raise DimensionError(f"layer_norm: gamma/beta must end in an axis of size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return _unbroadcast(dx, x.shape), dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------------- stochastic

def dropout(x, p: float, training: bool, rng: Optional[RngStream] = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an RngStream")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttentionMask:
    """Which key positions each query may attend to: ``causal`` or ``none``."""

    kind: str
    length: int

    def __post_init__(self):
        if self.kind not in ("causal", "none"):
            raise ConfigurationError(f"unknown mask kind {self.kind!r}")
        if self.length < 1:
            raise ConfigurationError("mask length must be positive")

    def allowed(self) -> Optional[np.ndarray]:
        return causal_allowed(self.length) if self.kind == "causal" else None


def causal_allowed(length: int) -> np.ndarray:
    """Boolean (length, length) matrix permitting query t to see keys <= t."""
    return np.tril(np.ones((length, length), dtype=bool))


def multihead_attention(
    query,
    key_value,
    weights: dict,
    heads: int,
    mask: Union[AttentionMask, np.ndarray, None] = None,
) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    ``query`` is (..., Lq, d) and ``key_value`` is (..., Lk, d). ``weights``
    holds ``wq, bq, wk, bk, wv, bv, wo, bo`` with (d, d) matrices. ``mask`` is an
    :class:`AttentionMask` or a boolean (Lq, Lk) matrix; disallowed pairs get
    exactly zero weight.
    """
    query, key_value = as_tensor(query), as_tensor(key_value)
    d = query.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    lq, lk = query.shape[-2], key_value.shape[-2]
    allowed = mask.allowed() if isinstance(mask, AttentionMask) else mask
    if allowed is not None and allowed.shape[-2:] != (lq, lk):
        raise DimensionError(f"mask shape {allowed.shape} does not match ({lq}, {lk})")

    def heads_first(t: Tensor) -> Tensor:
        # (..., L, d) -> (..., heads, L, dh)
        t = reshape(t, t.shape[:-1] + (heads, dh))
        n = t.ndim - 3
        return transpose(t, tuple(range(n)) + (n + 1, n, n + 2))

    q = heads_first(linear(query, weights["wq"], weights["bq"]))
    k = heads_first(linear(key_value, weights["wk"], weights["bk"]))
    v = heads_first(linear(key_value, weights["wv"], weights["bv"]))

    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    if allowed is None:
        attn = softmax(scores, axis=-1)
    else:
        attn = masked_softmax(scores, allowed, axis=-1)
    ctx = matmul(attn, v)
    n = ctx.ndim - 3
    ctx = transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2))
    ctx = reshape(ctx, ctx.shape[:-2] + (d,))
    return linear(ctx, weights["wo"], weights["bo"])
