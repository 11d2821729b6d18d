"""Permutation-equivariant primitives over temporal feature stacks.

A temporal feature map is a tensor of shape [B, T, F, H, W]; "temporal
permutation" always means reindexing axis 1. Every op here is either
equivariant to that action (attention, shared convolution, dynamic
filtering) or invariant (temporal mean).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, make_op


def _require_stack(x: Tensor) -> tuple[int, int, int, int, int]:
    if x.ndim != 5:
        raise ShapeError(f"expected a [B,T,F,H,W] stack, got shape {x.shape}")
    return x.shape


def temporal_self_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                            scale_on: str = "temporal") -> Tensor:
    """Per-pixel self-attention mixing the T temporal channels.

    For each pixel, with X the [T, F] slice: Q = X Wq, K = X Wk, V = X Wv and
    the output is softmax(Q Kᵀ / s) V. The divisor ``s`` is sqrt(T) when
    ``scale_on == "temporal"`` (the form used throughout this project) or
    sqrt(F') for the conventional key-dimension scaling.
    """
    b, t, f, h, w = _require_stack(x)
    for name, m in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
        if m.ndim != 2 or m.shape[0] != f:
            raise ShapeError(f"{name} must be [F={f}, F'], got {m.shape}")
    f_out = w_v.shape[1]
    if w_q.shape[1] != w_k.shape[1]:
        raise ShapeError(f"w_q and w_k must project to the same width, got {w_q.shape} vs {w_k.shape}")
    if scale_on == "temporal":
        divisor = math.sqrt(t)
    elif scale_on == "feature":
        divisor = math.sqrt(w_q.shape[1])
    else:
        raise ValueError(f"scale_on must be 'temporal' or 'feature', got {scale_on!r}")

    xt = ad.transpose(x, (0, 3, 4, 1, 2))            # [B,H,W,T,F]
    xf = ad.reshape(xt, (b * h * w, t, f))
    q = ad.matmul(xf, w_q)
    k = ad.matmul(xf, w_k)
    v = ad.matmul(xf, w_v)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / divisor)
    attn = ad.softmax_rows(scores)                   # [BHW,T,T], rows sum to 1
    y = ad.matmul(attn, v)
    y = ad.reshape(y, (b, h, w, t, f_out))
    return ad.transpose(y, (0, 3, 4, 1, 2))


def attention_weights(x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray,
                      scale_on: str = "temporal") -> np.ndarray:
    """Attention matrices [B,H,W,T,T] for inspection (numpy, no gradients)."""
    b, t, f, h, w = x.shape
    divisor = math.sqrt(t) if scale_on == "temporal" else math.sqrt(w_q.shape[1])
    xf = np.ascontiguousarray(x.transpose(0, 3, 4, 1, 2)).reshape(b * h * w, t, f)
    q = xf @ w_q
    k = xf @ w_k
    scores = q @ k.transpose(0, 2, 1) / divisor
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=-1, keepdims=True)
    return a.reshape(b, h, w, t, t)


def shared_conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Apply one conv2d kernel independently to every temporal slice."""
    b, t, f, h, wd = _require_stack(x)
    flat = ad.reshape(x, (b * t, f, h, wd))
    out = ad.conv2d(flat, w, bias)
    return ad.reshape(out, (b, t, out.shape[1], h, wd))


def temporal_mean(x: Tensor) -> Tensor:
    """Arithmetic mean over the temporal axis: the invariance point."""
    _require_stack(x)
    return ad.mean_over_axes(x, axes=1)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange [B, r²·C, H, W] into [B, C, rH, rW].

    Convention (row-major within each r×r block):
    out[c, r*i + di, r*j + dj] = in[c*r² + di*r + dj, i, j].
    """
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects [B,C,H,W], got {x.shape}")
    b, c_full, h, w = x.shape
    if c_full % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle channel count {c_full} not divisible by r²={r * r}")
    c = c_full // (r * r)
    x6 = ad.reshape(x, (b, c, r, r, h, w))
    x6 = ad.transpose(x6, (0, 1, 4, 2, 5, 3))        # [B,C,H,r,W,r]
    return ad.reshape(x6, (b, c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse rearrangement of :func:`pixel_shuffle`."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_unshuffle expects [B,C,H,W], got {x.shape}")
    b, c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"pixel_unshuffle spatial size {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    x6 = ad.reshape(x, (b, c, h, r, w, r))
    x6 = ad.transpose(x6, (0, 1, 3, 5, 2, 4))        # [B,C,r,r,H,W]
    return ad.reshape(x6, (b, c * r * r, h, w))


def _linear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned 1-D interpolation: source indices i0, i1 and weight of i1."""
    if n_in == 1 or n_out == 1:
        return np.zeros(n_out, dtype=np.int64), np.zeros(n_out, dtype=np.int64), np.zeros(n_out)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_in - 2)
    frac = pos - i0
    return i0, i0 + 1, frac


def bilinear_upsample(x: Tensor, r: int) -> Tensor:
    """Separable bilinear ×r upsampling with corner-aligned sampling.

    Input corners map exactly to output corners; r=1 is the identity.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects [B,C,H,W], got {x.shape}")
    if r < 1:
        raise ValueError(f"scale factor must be >= 1, got {r}")
    b, c, h, w = x.shape
    ho, wo = h * r, w * r
    y0, y1, wy = _linear_taps(h, ho)
    x0, x1, wx = _linear_taps(w, wo)
    wy_col = wy.reshape(1, 1, ho, 1)
    wx_row = wx.reshape(1, 1, 1, wo)

    data = x.data
    rows = data[:, :, y0, :] * (1.0 - wy_col) + data[:, :, y1, :] * wy_col
    out = rows[:, :, :, x0] * (1.0 - wx_row) + rows[:, :, :, x1] * wx_row
    out = out.astype(data.dtype, copy=False)

    def backward(g):
        if not x.requires_grad:
            return
        g_rows = np.zeros((b, c, ho, w), dtype=g.dtype)
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x0), g * (1.0 - wx_row))
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x1), g * wx_row)
        gx = np.zeros((b, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), g_rows * (1.0 - wy_col))
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), g_rows * wy_col)
        ad._accumulate(x, gx)

    return make_op(out, (x,), backward)


def dynamic_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Filter each temporal slice with its own K×K spatial kernel.

    x: [B,T,F,H,W]; kernels: [B,T,K,K]. The kernel of slice (b,t) is shared
    across all F feature maps of that slice; same zero padding keeps H,W.
    """
    b, t, f, h, w = _require_stack(x)
    if kernels.ndim != 4 or kernels.shape[:2] != (b, t):
        raise ShapeError(f"kernels must be [B={b},T={t},K,K], got {kernels.shape}")
    k = kernels.shape[2]
    if kernels.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"dynamic kernels must be square and odd, got {kernels.shape[2:]} ")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
    ker = kernels.data
    out = np.zeros_like(x.data)
    for di in range(k):
        for dj in range(k):
            out += xp[:, :, :, di : di + h, dj : dj + w] * ker[:, :, di, dj][:, :, None, None, None]

    def backward(g):
        if kernels.requires_grad:
            gk = np.zeros_like(ker)
            for di in range(k):
                for dj in range(k):
                    gk[:, :, di, dj] = (xp[:, :, :, di : di + h, dj : dj + w] * g).sum(axis=(2, 3, 4))
            ad._accumulate(kernels, gk)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gp[:, :, :, di : di + h, dj : dj + w] += g * ker[:, :, di, dj][:, :, None, None, None]
            ad._accumulate(x, gp[:, :, :, p : p + h, p : p + w])

    return make_op(out, (x, kernels), backward)
