"""Pure-numpy kernel backend: im2col convolution and pooling primitives.

Shapes follow the NCHW convention. All kernels take and return float64
arrays; the caller guarantees contiguity and dtype.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Padded input (N,C,H,W) -> patch matrix (N, C*kh*kw, Ho*Wo)."""
    n, c, h, w = xp.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, ho * wo)


def conv2d_forward(x, w, sh, sw, ph, pw):
    n, _, h, wid = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wid + 2 * pw - kw) // sw + 1
    cols = _im2col(_pad(x, ph, pw), kh, kw, sh, sw)
    out = np.matmul(w.reshape(co, ci * kh * kw)[None], cols)
    return np.ascontiguousarray(out.reshape(n, co, ho, wo))


def conv2d_dinput(gy, w, sh, sw, ph, pw, h, wid):
    """Adjoint of conv2d_forward in its input argument."""
    n, co, ho, wo = gy.shape
    _, ci, kh, kw = w.shape
    w2 = w.reshape(co, ci * kh * kw)
    dcols = np.matmul(w2.T[None], gy.reshape(n, co, ho * wo))
    dcols = dcols.reshape(n, ci, kh, kw, ho, wo)
    xp = np.zeros((n, ci, h + 2 * ph, wid + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, ph : ph + h, pw : pw + wid])


def conv2d_dweight(x, gy, sh, sw, ph, pw, kh, kw):
    """Adjoint of conv2d_forward in its weight argument."""
    n, co, ho, wo = gy.shape
    ci = x.shape[1]
    cols = _im2col(_pad(x, ph, pw), kh, kw, sh, sw)
    g2 = gy.reshape(n, co, ho * wo)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(dw.reshape(co, ci, kh, kw))


def maxpool_argmax(x, k, s):
    """Per-window argmax (first occurrence), returned as flat H*W indices."""
    n, c, h, w = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, k, k),
        strides=(s0, s1, s2 * s, s3 * s, s2, s3),
        writeable=False,
    )
    flat = windows.reshape(n, c, ho, wo, k * k)
    local = flat.argmax(axis=4)
    oh = np.arange(ho)[:, None]
    ow = np.arange(wo)[None, :]
    rows = oh * s + local // k
    cols = ow * s + local % k
    return (rows * w + cols).astype(np.int64)


def pool_take(x, idx):
    n, c, h, w = x.shape
    _, _, ho, wo = idx.shape
    taken = np.take_along_axis(x.reshape(n, c, h * w), idx.reshape(n, c, ho * wo), axis=2)
    return np.ascontiguousarray(taken.reshape(n, c, ho, wo))


def pool_scatter(g, idx, h, w):
    n, c, ho, wo = g.shape
    out = np.zeros((n, c, h * w))
    ni = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(out, (ni, ci, idx.reshape(n, c, ho * wo)), g.reshape(n, c, ho * wo))
    return out.reshape(n, c, h, w)
