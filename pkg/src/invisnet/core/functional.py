"""Differentiable image operators: convolution, resampling, activations, losses.

All operators accept either a single image ``[C, H, W]`` or a batch
``[N, C, H, W]`` and return the same rank they were given.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, abs_, as_tensor, mean, square, sub

LEAKY_SLOPE = 0.1


def _batched(x: Tensor, name: str) -> bool:
    if x.ndim == 3:
        return False
    if x.ndim == 4:
        return True
    raise ValueError(f"{name}: expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` of shape ``[Cout, Cin, k, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = _batched(x, "conv2d")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be [Cout,Cin,k,k], got shape {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be square and odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or pad={pad}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if c != cin:
        raise ValueError(f"conv2d: input channels {c} != kernel input channels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias length {bias.shape} != output channels {cout}")
    k = kh
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1:
        raise ValueError(f"conv2d: height {h} too small for kernel {k} with pad {pad}")
    if wo < 1:
        raise ValueError(f"conv2d: width {w} too small for kernel {k} with pad {pad}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(cout, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    parents = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))

    def bw(g):
        gb = g if batched else g[None]
        gm = gb.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            if not batched:
                gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=0)

    return _make(out, parents, bw, "conv2d")


@lru_cache(maxsize=64)
def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Row-interpolation matrix for align-corners-false bilinear upsampling."""
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if x.ndim < 2:
        raise ValueError(f"bilinear_upsample: need at least 2 spatial dims, got shape {x.shape}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    uh = upsample_matrix(x.shape[-2], factor)
    uw = upsample_matrix(x.shape[-1], factor)
    out = uh @ x.data @ uw.T
    return _make(out, (x,), lambda g: (uh.T @ g @ uw,), "upsample")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    x = as_tensor(x)
    batched = _batched(x, "max_pool2d")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} not divisible by {size}")
    blocks = xd.reshape(n, c, h // size, size, w // size, size)
    out = blocks.max(axis=(3, 5))
    # first maximum in each window receives the gradient
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)

    def bw(g):
        gb = g if batched else g[None]
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], gb[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx if batched else gx[0],)

    return _make(out if batched else out[0], (x,), bw, "max_pool2d")


def warp(x: Tensor, flow: Tensor) -> Tensor:
    """Backward bilinear warp: ``out(p) = x(p + flow(p))`` with coordinates clamped to the image.

    ``flow`` has channels (dx, dy) in pixels. Differentiable in both arguments;
    the flow gradient is zero where the sampling position was clamped.
    """
    x, flow = as_tensor(x), as_tensor(flow)
    batched = _batched(x, "warp")
    xd = x.data if batched else x.data[None]
    fd = flow.data if batched else flow.data[None]
    n, c, h, w = xd.shape
    if fd.shape != (n, 2, h, w):
        raise ValueError(f"warp: flow must be [N,2,H,W] matching the image, got {flow.shape} for image {x.shape}")
    if h < 2 or w < 2:
        raise ValueError(f"warp: image must be at least 2x2, got {h}x{w}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx + fd[:, 0], yy + fd[:, 1]
    xs, ys = np.clip(px, 0, w - 1), np.clip(py, 0, h - 1)
    inside_x = (px > 0) & (px < w - 1)
    inside_y = (py > 0) & (py < h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2)
    ax, ay = (xs - x0)[:, None], (ys - y0)[:, None]
    # flat indices of the four neighbours, per batch item
    base = np.arange(n)[:, None, None] * (h * w)
    i00 = base + y0 * w + x0
    idx = (i00, i00 + 1, i00 + w, i00 + w + 1)
    flat = xd.transpose(1, 0, 2, 3).reshape(c, -1)
    v00, v01, v10, v11 = (flat[:, i.ravel()].reshape(c, n, h, w).transpose(1, 0, 2, 3) for i in idx)
    top = v00 + ax * (v01 - v00)
    bot = v10 + ax * (v11 - v10)
    out = top + ay * (bot - top)

    def bw(g):
        gb = g if batched else g[None]
        wts = ((1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay)
        gx = np.zeros((c, n * h * w))
        for i, wt in zip(idx, wts):
            contrib = (gb * wt).transpose(1, 0, 2, 3).reshape(c, -1)
            for ch in range(c):
                gx[ch] += np.bincount(i.ravel(), weights=contrib[ch], minlength=n * h * w)
        gx = gx.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        dx = ((1 - ay) * (v01 - v00) + ay * (v11 - v10)) * gb
        dy = (bot - top) * gb
        gf = np.stack([dx.sum(1) * inside_x, dy.sum(1) * inside_y], axis=1)
        return (gx, gf) if batched else (gx[0], gf[0])

    return _make(out if batched else out[0], (x, flow), bw, "warp")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# losses ---------------------------------------------------------------------


def l1_loss(pred: Tensor, target) -> Tensor:
    return mean(abs_(sub(pred, target)))


def mse_loss(pred: Tensor, target) -> Tensor:
    return mean(square(sub(pred, target)))


def bce_with_logits(logits: Tensor, targets: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy on raw logits, positives weighted by ``pos_weight``."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    wt = np.where(y > 0.5, pos_weight, 1.0)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.array((wt * per).sum() / n)
    return _make(out, (logits,), lambda g: (g * wt * (_sigmoid(z) - y) / n,), "bce")
