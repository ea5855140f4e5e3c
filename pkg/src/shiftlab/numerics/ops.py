"""Differentiable primitives.

Each function computes its forward value with numpy and registers a
backward closure mapping the upstream gradient to one gradient per input.
Broadcasting follows numpy rules; backward reduces gradients back to each
operand's shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return make_result(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (2.0 * g * ad,)

    return make_result(ad * ad, (a,), bw, "square")


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd ** 2)
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner
        return (g * d,)

    return make_result(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def bw(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return make_result(out, (x,), bw, "silu")


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


# -- shape manipulation ------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc

    def bw(g):
        return (g.reshape(src),)

    return make_result(out, (a,), bw, "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return make_result(np.transpose(a.data, axes), (a,), bw, "transpose")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape, dtype = a.shape, a.data.dtype
    out = a.data[index]

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), bw, "slice")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in ts]} along axis {axis}") from exc
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, ts, bw, "concat")


# -- reductions --------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[i] for i in ax]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).astype(a.data.dtype, copy=True),)

    return make_result(np.asarray(out), (a,), bw, "mean")


# -- normalization and attention pieces --------------------------------

def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get weight exactly 0."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {x.shape}")
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise DimensionError("layer_norm needs a normalization dimension >= 2")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return make_result(out.astype(xd.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return make_result(np.asarray((diff * diff).mean()), (pred, target), bw, "mse_loss")


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        from ..errors import UnknownPromptError
        raise UnknownPromptError(f"ids outside [0, {rows}): {ids.tolist()}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_result(table.data[ids], (table,), bw, "embedding")


def patchify(x, p: int) -> Tensor:
    """(B, C, H, W) -> (B, (H/p)*(W/p), C*p*p), patches in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"patchify expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
    y = reshape(x, (b, c, h // p, p, w // p, p))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (b, (h // p) * (w // p), c * p * p))


def unpatchify(tokens, p: int, c: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = as_tensor(tokens)
    b = tokens.shape[0]
    if tokens.shape[1:] != ((h // p) * (w // p), c * p * p):
        raise DimensionError(f"unpatchify: tokens {tokens.shape} do not match {c}x{h}x{w}/p{p}")
    y = reshape(tokens, (b, h // p, w // p, c, p, p))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (b, c, h, w))
