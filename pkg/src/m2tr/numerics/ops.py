"""Differentiable primitives over :class:`Tensor`.

Binary elementwise ops only broadcast in the bias sense: the two shapes must
be equal, one operand may be a scalar, or one shape may be a trailing suffix
of the other. Everything else is a :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from m2tr.errors import ShapeError
from m2tr.numerics.tensor import Tensor, make_result


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "div")

    def back(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data / b.data, (a, b), back, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (equal batch shapes)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeError(f"matmul: batch ranks differ {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result(a.data @ b.data, (a, b), back, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), back, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def back(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), back, "sigmoid")


def log(x: Tensor) -> Tensor:
    def back(g):
        return (g / x.data,)

    return make_result(np.log(x.data), (x,), back, "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def back(g):
        return (g * 0.5 / out,)

    return make_result(out, (x,), back, "sqrt")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * inside,)

    return make_result(np.clip(x.data, lo, hi), (x,), back, "clamp")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def back(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return make_result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), back, "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make_result(np.stack([t.data for t in xs], axis=axis), tuple(xs), back, "stack")


def index_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``x[idx]`` along the first axis."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(x.data[idx], (x,), back, "index_rows")


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result(p, (m,), back, "softmax")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Divide each row (last axis) by its Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return make_result(y, (x,), back, "l2_normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), back, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel (last axis) with statistics over every other axis."""
    lead = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in lead]))
    mu = x.data.mean(axis=lead, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=lead, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(lead, keepdims=True) - xhat * (gx_hat * xhat).sum(lead, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), back, "batch_norm")


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation on NHWC maps; ``weight`` is (k, k, C_in, C_out).

    A rank-3 (H, W, C) input is treated as a batch of one.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weight {weight.shape}")
    k, k2, cin, cout = weight.shape
    if k != k2:
        raise ShapeError("conv2d: square kernels only")
    if xd.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {xd.shape[-1]} channels, kernel expects {cin}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    b, h, w, _ = xd.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w}+{padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = _pad_hw(xd, padding)
    if k == 1:
        cols = xp[:, ::stride, ::stride, :][:, :ho, :wo, :].reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        # rows ordered (ki, kj, c) to match the kernel layout
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} for {cout} outputs")
        out += bias.data
    out = out.reshape(b, ho, wo, cout)
    if squeeze:
        out = out[0]

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(b, ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        for i in range(k):  # col2im: each kernel tap scatters back onto a strided input window
            for j in range(k):
                gxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back, "conv2d")


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    b, h, w, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * c)


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (n_in*factor, n_in)."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of an (B, H, W, C) or (H, W, C) map by an integer factor."""
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    axes = (1, 2) if x.ndim == 4 else (0, 1)
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample_bilinear: rank {x.ndim}")
    uh = bilinear_matrix(x.shape[axes[0]], factor, x.dtype)
    uw = bilinear_matrix(x.shape[axes[1]], factor, x.dtype)

    def apply(arr, mh, mw):
        arr = np.moveaxis(np.tensordot(mh, arr, axes=([1], [axes[0]])), 0, axes[0])
        return np.moveaxis(np.tensordot(mw, arr, axes=([1], [axes[1]])), 0, axes[1])

    out = apply(x.data, uh, uw)

    def back(g):
        return (apply(g, uh.T, uw.T),)

    return make_result(np.ascontiguousarray(out), (x,), back, "upsample")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a (B, H, W, C) map -> (B, C)."""
    return mean(x, axis=(1, 2))


def patchify(x: Tensor, r: int) -> Tensor:
    """(B, H, W, C) -> (B, N, r*r*C) of non-overlapping patches, row-major patch order."""
    b, h, w, c = x.shape
    if h % r or w % r:
        raise ShapeError(f"patch side {r} does not divide {h}x{w}")
    t = reshape(x, (b, h // r, r, w // r, r, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, (h // r) * (w // r), r * r * c))


def unpatchify(tokens: Tensor, r: int, h: int, w: int, c: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b = tokens.shape[0]
    t = reshape(tokens, (b, h // r, w // r, r, r, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, h, w, c))
