"""Forward ops with hand-written backward rules.

Feature tensors are channel-first: ``(C, ...)`` for point features and
``(C, H, W)`` for maps. There is no batch axis; one graph covers one frame.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_node

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), back, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.array(x.data.sum()), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def back(g):
        return (np.full(x.shape, float(g) / n),)

    return make_node(np.array(x.data.mean()), (x,), back, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def back(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), back, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return make_node(x.data.transpose(axes), (x,), back, "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None

    def back(g):
        return (_unbroadcast(g, x.shape),)

    return make_node(out, (x,), back, "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs], detail=f"axis={axis}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return make_node(out, xs, back, "concat")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-position affine map on the leading (channel) axis: ``(C_in, ...) -> (C_out, ...)``."""
    if w.ndim != 2 or x.shape[0] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape, detail="expects x (C_in, ...) and W (C_out, C_in)")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias must be (C_out,)")
    rest = x.shape[1:]
    x2 = x.data.reshape(x.shape[0], -1)
    y = w.data @ x2
    if b is not None:
        y = y + b.data[:, None]
    out = y.reshape((w.shape[0],) + rest)

    def back(g):
        g2 = g.reshape(w.shape[0], -1)
        gx = (w.data.T @ g2).reshape(x.shape)
        gw = g2 @ x2.T
        gb = g2.sum(axis=1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out, parents, back, "linear")


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_node(x.data * cdf, (x,), back, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def back(g):
        return (g * s * (1.0 - s),)

    return make_node(s, (x,), back, "sigmoid")


def _param_view(p: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return p.reshape(shape)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, axis: int = 0, eps: float = LN_EPS) -> Tensor:
    """Normalise over ``axis`` then apply per-feature scale and shift (vectors of that axis' length)."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if scale.shape != (n,) or shift.shape != (n,):
        raise ShapeError("layer_norm", x.shape, scale.shape, shift.shape, detail=f"axis={axis}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    sc = _param_view(scale.data, x.ndim, axis)
    out = xhat * sc + _param_view(shift.data, x.ndim, axis)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        gscale = (g * xhat).sum(axis=other)
        gshift = g.sum(axis=other)
        gxhat = g * sc
        gx = inv * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, gscale, gshift

    return make_node(out, (x, scale, shift), back, "layer_norm")


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``. Masked-out entries get weight 0; fully masked slices give all zeros."""
    axis = axis % x.ndim
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (x,), back, "softmax")


def maxpool_over_points(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max over the last axis, ``(C, ..., N) -> (C, ...)``.

    ``mask`` (shape of ``x`` without the channel axis) selects real points;
    slices with no real point yield 0. Ties route the gradient to the first
    maximal element.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        z = np.where(mask, z, -np.inf)
        empty = ~mask.any(axis=-1)
    else:
        empty = np.zeros(x.shape[:-1], dtype=bool)
    idx = np.argmax(z, axis=-1)
    out = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0]
    out = np.where(empty, 0.0, out)

    def back(g):
        gx = np.zeros(x.shape)
        gsrc = np.where(empty, 0.0, g)
        np.put_along_axis(gx, idx[..., None], gsrc[..., None], axis=-1)
        return (gx,)

    return make_node(out, (x,), back, "maxpool_over_points")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    f = int(factor)
    out = x.data.repeat(f, axis=-2).repeat(f, axis=-1)

    def back(g):
        h, w = x.shape[-2], x.shape[-1]
        gg = g.reshape(g.shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1))
        return (gg,)

    return make_node(out, (x,), back, "nearest_upsample")


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """2-D cross-correlation of ``(C_in, H, W)`` with ``(C_out, C_in, kh, kw)``.

    Default padding is ``kh // 2`` (1 for 3x3, 0 for 1x1): stride 1 keeps the
    size and stride 2 halves an even size.
    """
    if x.ndim != 3 or k.ndim != 4 or k.shape[1] != x.shape[0]:
        raise ShapeError("conv2d", x.shape, k.shape, detail="expects x (C_in,H,W), k (C_out,C_in,kh,kw)")
    cout, cin, kh, kw = k.shape
    pad = kh // 2 if padding is None else padding
    _, h, w = x.shape
    ho, wo = _conv_out_size(h, kh, stride, pad), _conv_out_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.shape, k.shape, detail="input smaller than kernel")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((cout, ho, wo))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, ky:ky + hs:stride, kx:kx + ws:stride]
            out += np.tensordot(k.data[:, :, ky, kx], patch, axes=(1, 0))
    if b is not None:
        out += b.data[:, None, None]

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[:, ky:ky + hs:stride, kx:kx + ws:stride]
                gk[:, :, ky, kx] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gxp[:, ky:ky + hs:stride, kx:kx + ws:stride] += np.tensordot(k.data[:, :, ky, kx], g, axes=(0, 0))
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gk]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, k) if b is None else (x, k, b)
    return make_node(out, parents, back, "conv2d")


def deconv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 2,
             padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution, ``k`` shaped ``(C_in, C_out, kh, kw)``.

    Output size is ``(H - 1) * stride - 2 * padding + kh + output_padding``;
    with the defaults a 1x1 input gives a 3x3 output.
    """
    if x.ndim != 3 or k.ndim != 4 or k.shape[0] != x.shape[0]:
        raise ShapeError("deconv2d", x.shape, k.shape, detail="expects x (C_in,H,W), k (C_in,C_out,kh,kw)")
    if output_padding > padding:
        raise ShapeError("deconv2d", x.shape, k.shape, detail="output_padding must not exceed padding")
    cin, cout, kh, kw = k.shape
    _, h, w = x.shape
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    full = np.zeros((cout, hf, wf))
    hs, ws = stride * (h - 1) + 1, stride * (w - 1) + 1
    for ky in range(kh):
        for kx in range(kw):
            full[:, ky:ky + hs:stride, kx:kx + ws:stride] += np.tensordot(k.data[:, :, ky, kx], x.data, axes=(0, 0))
    ho = hf - 2 * padding + output_padding
    wo = wf - 2 * padding + output_padding
    out = full[:, padding:padding + ho, padding:padding + wo].copy()
    if b is not None:
        out += b.data[:, None, None]

    def back(g):
        gfull = np.zeros((cout, hf, wf))
        gfull[:, padding:padding + ho, padding:padding + wo] = g
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(k.data)
        for ky in range(kh):
            for kx in range(kw):
                gs = gfull[:, ky:ky + hs:stride, kx:kx + ws:stride]
                gk[:, :, ky, kx] = np.tensordot(x.data, gs, axes=([1, 2], [1, 2]))
                gx += np.tensordot(k.data[:, :, ky, kx], gs, axes=(1, 0))
        grads = [gx, gk]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, k) if b is None else (x, k, b)
    return make_node(out, parents, back, "deconv2d")


def gather_columns(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[c, ...] = x[c, index[...]]`` for a ``(C, M)`` input; index -1 yields 0."""
    if x.ndim != 2:
        raise ShapeError("gather_columns", x.shape, detail="expects (C, M)")
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = x.data[:, safe] * valid

    def back(g):
        gx = np.zeros(x.shape)
        np.add.at(gx.T, safe[valid], np.moveaxis(g, 0, -1)[valid])
        return (gx,)

    return make_node(out, (x,), back, "gather_columns")


def scatter_columns(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Place column ``j`` of ``(C, V)`` at column ``index[j]`` of a zero ``(C, size)`` canvas."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[1],):
        raise ShapeError("scatter_columns", x.shape, index.shape)
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter_columns: duplicate target indices")
    if len(index) and (index.min() < 0 or index.max() >= size):
        raise ValueError("scatter_columns: target index out of range")
    out = np.zeros((x.shape[0], size))
    out[:, index] = x.data

    def back(g):
        return (g[:, index],)

    return make_node(out, (x,), back, "scatter_columns")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError("slice_channels", x.shape, detail=f"bad range {start}:{stop}")
    out = x.data[start:stop].copy()

    def back(g):
        gx = np.zeros(x.shape)
        gx[start:stop] = g
        return (gx,)

    return make_node(out, (x,), back, "slice_channels")
