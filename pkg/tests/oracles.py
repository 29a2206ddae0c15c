"""Independent reference implementations used by the tests.

Written with plain loops and no imports from the package, so a bug in the
vectorized code cannot be mirrored here.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, k, b, stride, pad):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            s += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = s
    return out


def bilinear_point(img2d, y, x):
    """Align-corners-false sample at output-grid source coordinate, edges clamped."""
    h, w = img2d.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img2d[y0, x0] * (1 - fx) + img2d[y0, x1] * fx
    bot = img2d[y1, x0] * (1 - fx) + img2d[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def upsample_loop(img2d, factor):
    h, w = img2d.shape
    out = np.zeros((h * factor, w * factor))
    for i in range(h * factor):
        for j in range(w * factor):
            out[i, j] = bilinear_point(img2d, (i + 0.5) / factor - 0.5, (j + 0.5) / factor - 0.5)
    return out


def central_gradient_loop(img):
    """Gradient magnitude of the channel mean with central differences; border pixels 0."""
    m = img.mean(axis=0)
    h, w = m.shape
    out = np.zeros((h, w))
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            gx = (m[i, j + 1] - m[i, j - 1]) / 2.0
            gy = (m[i + 1, j] - m[i - 1, j]) / 2.0
            out[i, j] = math.sqrt(gx * gx + gy * gy)
    return out


def feature_distance_loop(t, s):
    c, h, w = t.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for ch in range(c):
                acc += (t[ch, i, j] - s[ch, i, j]) ** 2
            out[i, j] = math.sqrt(acc) / math.sqrt(c)
    return out


def coverage_count(score, fn_mask, threshold):
    h, w = score.shape
    fn_total = fn_hit = flagged = 0
    for i in range(h):
        for j in range(w):
            hit = score[i, j] >= threshold
            flagged += int(hit)
            if fn_mask[i, j]:
                fn_total += 1
                fn_hit += int(hit)
    cov = None if fn_total == 0 else fn_hit / fn_total
    return cov, flagged / (h * w)


def auc_pairs(a, b):
    wins = 0.0
    for x in a:
        for y in b:
            wins += 1.0 if y > x else 0.5 if y == x else 0.0
    return wins / (len(a) * len(b))


def box_iou(a, b):
    """Boxes as (x, y, w, h) with (x, y) the top-left corner."""
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def finite_difference(f, arrays, eps=1e-5):
    """Central differences of scalar f() w.r.t. every entry of each array (modified in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def shift_image(img, dx, dy):
    """out(y, x) = img(y - dy, x - dx): content moves by (+dx, +dy); vacated pixels copy the edge."""
    h, w = img.shape[-2:]
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            out[..., i, j] = img[..., min(max(i - dy, 0), h - 1), min(max(j - dx, 0), w - 1)]
    return out


def fuse_loop(d, t):
    """Clamped fusion per pixel: 1 - mean_k clip((t_k - d_k) / t_k, 0, 1)."""
    d = np.asarray(d, dtype=np.float64)
    out = np.empty(d.shape[1:])
    for idx in np.ndindex(*d.shape[1:]):
        acc = 0.0
        for k in range(3):
            r = (t[k] - d[(k,) + idx]) / t[k]
            acc += min(max(r, 0.0), 1.0)
        out[idx] = 1.0 - acc / 3.0
    return out
