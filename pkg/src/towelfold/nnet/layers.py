"""Forward/backward pairs for every layer the keypoint network uses.

Activations are NCHW numpy arrays. Each ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` consumes the upstream gradient and the cache.
All ops keep the dtype of their inputs, so the same code serves float32
training and float64 gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

BCE_EPS = 1e-7


def _check_4d(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects an NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------- conv2d
#
# Stride-1 convolutions run on a "flat padded" layout: the zero-padded input is
# stored as (C, N * Hp * Wp), so the window tap (di, dj) of every output pixel
# is the contiguous slice shifted by di * Wp + dj. Each tap then becomes one
# GEMM on a strided view and no im2col buffer is materialized. Work is split
# into column chunks small enough to stay in L2. Other strides use im2col.


def _chunk_cols(c: int, f: int) -> int:
    return int(np.clip(131072 // max(c + f, 1), 1024, 8192))


def _tap_offsets(kh, kw, wp):
    return [i * wp + j for i in range(kh) for j in range(kw)]


def conv2d_forward(x, w, b, stride: int = 1, padding: int | None = None):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (F, C, kh, kw) plus bias.

    ``padding`` defaults to ``(kh - 1) // 2``, which keeps the spatial size at
    stride 1 for odd kernels.
    """
    _check_4d("conv2d", x)
    if w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"conv2d: input {x.shape} incompatible with kernel {w.shape} / bias {b.shape}"
        )
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    kh, kw = w.shape[2:]
    if padding is None:
        padding = (kh - 1) // 2
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if stride == 1:
        return _conv_flat_forward(x, w, b, padding)
    return _conv_im2col_forward(x, w, b, stride, padding)


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``."""
    if cache[0] == "flat":
        return _conv_flat_backward(dout, cache)
    return _conv_im2col_backward(dout, cache)


def _conv_flat_forward(x, w, b, p):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = hp - kh + 1, wp - kw + 1
    size = n * hp * wp
    xf = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xf[:, :, p:p + h, p:p + wd] = x.transpose(1, 0, 2, 3)
    xf = xf.reshape(c, size)

    offs = _tap_offsets(kh, kw, wp)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1).reshape(kh * kw, f, c))
    total = size - offs[-1]
    out = np.zeros((f, size), dtype=x.dtype)
    step = _chunk_cols(c, f)
    for q0 in range(0, total, step):
        q1 = min(q0 + step, total)
        acc = out[:, q0:q1]
        for t, o in enumerate(offs):
            acc += taps[t] @ xf[:, q0 + o:q1 + o]
    out = out.reshape(f, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    out = out + b[None, :, None, None]
    return out, ("flat", x.shape, w.shape, taps, xf, p)


def _conv_flat_backward(dout, cache):
    _, (n, c, h, wd), w_shape, taps, xf, p = cache
    f, _, kh, kw = w_shape
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = dout.shape[2:]
    size = n * hp * wp
    offs = _tap_offsets(kh, kw, wp)
    m = offs[-1]

    # upstream gradient on the padded grid, with m leading zeros so that the
    # transposed (input-gradient) taps never index below 0
    df = np.zeros((f, m + size), dtype=dout.dtype)
    df[:, m:].reshape(f, n, hp, wp)[:, :, :ho, :wo] = dout.transpose(1, 0, 2, 3)
    db = dout.sum(axis=(0, 2, 3))

    step = _chunk_cols(c, f)
    total = size - m
    dtaps = np.zeros_like(taps)
    for q0 in range(0, total, step):
        q1 = min(q0 + step, total)
        dc = df[:, m + q0:m + q1]
        for t, o in enumerate(offs):
            dtaps[t] += dc @ xf[:, q0 + o:q1 + o].T

    taps_t = np.ascontiguousarray(taps.transpose(0, 2, 1))
    dxf = np.zeros((c, size), dtype=dout.dtype)
    for q0 in range(0, size, step):
        q1 = min(q0 + step, size)
        acc = dxf[:, q0:q1]
        for t, o in enumerate(offs):
            acc += taps_t[t] @ df[:, q0 + m - o:q1 + m - o]
    dx = dxf.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
    dw = dtaps.reshape(kh, kw, f, c).transpose(2, 3, 0, 1)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def _conv_im2col_forward(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(f, -1), cols)
    out += b[None, :, None]
    return out.reshape(n, f, ho, wo), ("im2col", x.shape, w, cols, stride, padding)


def _conv_im2col_backward(dout, cache):
    _, x_shape, w, cols, stride, padding = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.reshape(n, f, ho * wo)

    db = d2.sum(axis=(0, 2))
    dw = np.zeros((f, c * kh * kw), dtype=dout.dtype)
    for k in range(n):
        dw += d2[k] @ cols[k].T
    dw = dw.reshape(w.shape)

    dcols = np.matmul(w.reshape(f, -1).T, d2).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp[:, :, padding:padding + h, padding:padding + wd], dw, db


# ----------------------------------------------------------- elementwise

def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid_forward(x):
    # tanh form never overflows; the clip keeps the output strictly inside (0, 1)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def residual_add_forward(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"residual_add: shapes {x.shape} and {y.shape} differ")
    return x + y, None


def residual_add_backward(dout, cache=None):
    return dout, dout


def concat_forward(x, y):
    """Channel-wise concatenation (the U-Net skip)."""
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"concat: shapes {x.shape} and {y.shape} are incompatible")
    return np.concatenate([x, y], axis=1), x.shape[1]


def concat_backward(dout, split):
    return dout[:, :split], dout[:, split:]


# ----------------------------------------------------------- resampling

def maxpool2_forward(x):
    """2x2 max pooling with stride 2."""
    _check_4d("maxpool2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} is not divisible by 2")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    # ties route the gradient to the first maximum only, like argmax
    x_shape, idx = cache
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(x_shape)


def _upsample_axis(x, axis):
    """Doubles ``x`` along ``axis`` with half-pixel (align_corners=False) sampling."""
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.75 * x + 0.25 * prev
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _upsample_axis_backward(g, axis):
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    dx = 0.75 * (ge + go)
    # prev[k] = x[k-1] (x[0] at k=0); nxt[k] = x[k+1] (x[n-1] at the end)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., :1] += 0.25 * ge[..., :1]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1:] += 0.25 * go[..., -1:]
    return np.moveaxis(dx, -1, axis)


def bilinear_upsample2_forward(x):
    _check_4d("bilinear_upsample2", x)
    return _upsample_axis(_upsample_axis(x, 2), 3), None


def bilinear_upsample2_backward(dout, cache=None):
    return _upsample_axis_backward(_upsample_axis_backward(dout, 3), 2)


# ------------------------------------------------------------------ loss

def bce_loss_forward(pred, target, eps: float = BCE_EPS):
    """Mean pixel-wise binary cross entropy with ``pred`` clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {target.shape}")
    lo = pred.dtype.type(eps)
    hi = pred.dtype.type(1.0) - lo
    p = np.clip(pred, lo, hi)
    # accumulate in float64 so the scalar loss does not depend on summation order noise
    terms = target * np.log(p) + (1.0 - target) * np.log1p(-p)
    loss = -float(np.mean(terms, dtype=np.float64))
    return loss, (pred, target, p, lo, hi)


def bce_loss_backward(cache, scale: float = 1.0):
    pred, target, p, lo, hi = cache
    grad = (p - target) / (p * (1.0 - p))
    grad *= (pred > lo) & (pred < hi)
    grad *= pred.dtype.type(scale / pred.size)
    return grad.astype(pred.dtype, copy=False)
