"""Convolution, linear and resampling kernels on the differentiation tape.

Forward passes are im2col + GEMM; backward passes scatter-add the column
gradients back (col2im).  Layouts are channels-last: images are
(N, H, W, C), video clips are (T, H, W, C).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numcore as nc
from .numcore import ShapeError, Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(M, Cin) @ (Cin, Cout) + bias, the pointwise (1x1 conv) projection."""
    x, w = nc.as_tensor(x), nc.as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {w.shape} incompatible")
    out = x.data @ w.data
    if b is not None:
        b = nc.as_tensor(b)
        out = out + b.data

    def bwd(g):
        gb = np.sum(g, axis=0) if b is not None else None
        return g @ w.data.T, x.data.T @ g, gb

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return nc.custom_op(out, parents, lambda g: (g @ w.data.T, x.data.T @ g))
    return nc.custom_op(out, parents, bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over (N, H, W, Cin) with kernel (kh, kw, Cin, Cout)."""
    x, w, b = nc.as_tensor(x), nc.as_tensor(w), nc.as_tensor(b)
    N, H, W, Ci = x.shape
    kh, kw, ci, Co = w.shape
    if ci != Ci:
        raise ShapeError(f"conv2d: input channels {Ci} != kernel {ci}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    # (N, Ho, Wo, Ci, kh, kw) -> (N*Ho*Wo, kh*kw*Ci)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * Ci)
    wmat = w.data.reshape(kh * kw * Ci, Co)
    out = (cols @ wmat + b.data).reshape(N, Ho, Wo, Co)

    def bwd(g):
        gmat = g.reshape(N * Ho * Wo, Co)
        gw = (cols.T @ gmat).reshape(w.shape)
        gb = np.sum(gmat, axis=0)
        gcols = (gmat @ wmat.T).reshape(N, Ho, Wo, kh, kw, Ci)
        gxp = np.zeros((N, H + 2 * p, W + 2 * p, Ci))
        ny = np.arange(N)[:, None, None, None, None]
        yy = (s * np.arange(Ho))[None, :, None, None, None] + np.arange(kh)[
            None, None, None, :, None
        ]
        xx = (s * np.arange(Wo))[None, None, :, None, None] + np.arange(kw)[
            None, None, None, None, :
        ]
        np.add.at(gxp, (ny, yy, xx), gcols)
        gx = gxp[:, p : p + H, p : p + W] if p else gxp
        return gx, gw, gb

    return nc.custom_op(out, (x, w, b), bwd)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=(1, 2, 2), padding=(1, 1, 1)) -> Tensor:
    """3-D (spatio-temporal) convolution over (T, H, W, Cin)."""
    x, w, b = nc.as_tensor(x), nc.as_tensor(w), nc.as_tensor(b)
    T, H, W, Ci = x.shape
    kt, kh, kw, ci, Co = w.shape
    if ci != Ci:
        raise ShapeError(f"conv3d: input channels {Ci} != kernel {ci}")
    st, sh, sw = stride
    pt, ph, pw = padding
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if min(To, Ho, Wo) < 1:
        raise ShapeError(f"conv3d: kernel {w.shape} too large for input {x.shape}")

    xp = np.pad(x.data, ((pt, pt), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kt, kh, kw), axis=(0, 1, 2))[::st, ::sh, ::sw]
    cols = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(To * Ho * Wo, kt * kh * kw * Ci)
    wmat = w.data.reshape(kt * kh * kw * Ci, Co)
    out = (cols @ wmat + b.data).reshape(To, Ho, Wo, Co)

    def bwd(g):
        gmat = g.reshape(To * Ho * Wo, Co)
        gw = (cols.T @ gmat).reshape(w.shape)
        gb = np.sum(gmat, axis=0)
        gcols = (gmat @ wmat.T).reshape(To, Ho, Wo, kt, kh, kw, Ci)
        gxp = np.zeros((T + 2 * pt, H + 2 * ph, W + 2 * pw, Ci))
        tt = (st * np.arange(To))[:, None, None, None, None, None] + np.arange(kt)[
            None, None, None, :, None, None
        ]
        yy = (sh * np.arange(Ho))[None, :, None, None, None, None] + np.arange(kh)[
            None, None, None, None, :, None
        ]
        xx = (sw * np.arange(Wo))[None, None, :, None, None, None] + np.arange(kw)[
            None, None, None, None, None, :
        ]
        np.add.at(gxp, (tt, yy, xx), gcols)
        return gxp[pt : pt + T, ph : ph + H, pw : pw + W], gw, gb

    return nc.custom_op(out, (x, w, b), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of (N, H, W, C)."""
    x = nc.as_tensor(x)
    N, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(N, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return nc.custom_op(out, (x,), bwd)


def channel_rmsnorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each position to unit RMS over the channel axis."""
    x = nc.as_tensor(x)
    c = x.shape[-1]
    ms = np.mean(x.data**2, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = x.data * r

    def bwd(g):
        dot = np.sum(g * x.data, axis=-1, keepdims=True)
        return (g * r - x.data * (dot * r**3 / c),)

    return nc.custom_op(out, (x,), bwd)


def init_conv(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform +-sqrt(1/fan_in), fan_in = product of all but the last dim."""
    fan_in = int(np.prod(shape[:-1]))
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
