"""
Forward kernels with backward rules, all channels-first ``[C, H, W]``.

Dense convolutions lower to a single im2col matmul. Depthwise convolutions
loop over kernel offsets with one broadcast multiply each, which keeps their
memory at O(input) for the large 7x7 kernels.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ShapeError
from .tensor import Tensor, as_tensor, make_result

_flops: contextvars.ContextVar = contextvars.ContextVar("sdedet_flops", default=None)


@contextlib.contextmanager
def count_flops():
    """Accumulate 2 x multiply-accumulates of conv/matmul ops run inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    box = [0]
    token = _flops.set(box)
    try:
        yield box
    finally:
        _flops.reset(token)


def _tally(macs: int) -> None:
    box = _flops.get()
    if box is not None:
        box[0] += 2 * int(macs)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """``c[..., i, j] = sum_t a[..., i, t] * b[..., t, j]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    _tally(out.size * a.shape[-1])

    def rule(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return make_result(out, (a, b), rule)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------
def _out_extent(n: int, k: int, stride: int, pad: int, what: str, shape) -> int:
    if stride < 1 or pad < 0:
        raise ShapeError(f"{what}: invalid stride={stride} / pad={pad}")
    if k > n + 2 * pad:
        raise ShapeError(f"{what}: kernel extent {k} exceeds padded input extent {n + 2 * pad} "
                         f"(input shape {shape})")
    return (n + 2 * pad - k) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    view = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return view.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[C_in,H,W]`` with ``weight[C_out,C_in,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    _, h, w = x.shape
    ho = _out_extent(h, kh, stride, pad, "conv2d", x.shape)
    wo = _out_extent(w, kw, stride, pad, "conv2d", x.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = weight.data
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(cin, -1)
    else:
        cols = _im2col(xp, kh, kw, ho, wo, stride)
    out = (wd.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    _tally(cout * cin * kh * kw * ho * wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def rule(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wd.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    _window(gxp, i, j, ho, wo, stride)[...] += gcols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return make_result(out, parents, rule)


def depthwise_conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation of ``x[C,H,W]`` with ``weight[C,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[0] != x.shape[0]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with weight {weight.shape}")
    c, kh, kw = weight.shape
    _, h, w = x.shape
    ho = _out_extent(h, kh, stride, pad, "depthwise_conv2d", x.shape)
    wo = _out_extent(w, kw, stride, pad, "depthwise_conv2d", x.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = weight.data
    out = np.zeros((c, ho, wo), dtype=np.result_type(x.data, wd))
    for i in range(kh):
        for j in range(kw):
            out += wd[:, i, j, None, None] * _window(xp, i, j, ho, wo, stride)
    _tally(c * kh * kw * ho * wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def rule(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    gw[:, i, j] = (g * _window(xp, i, j, ho, wo, stride)).sum(axis=(1, 2))
                if gxp is not None:
                    _window(gxp, i, j, ho, wo, stride)[...] += wd[:, i, j, None, None] * g
        gx = None
        if gxp is not None:
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return make_result(out, parents, rule)


def pointwise_conv(x, weight, bias=None) -> Tensor:
    """1x1 convolution with a 2-D ``weight[C_out, C_in]``."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"pointwise_conv: weight must be 2-D, got {weight.shape}")
    return conv2d(x, weight.reshape(weight.shape + (1, 1)), bias)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------
def max_pool2d(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Windowed maximum; padded cells never win."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"max_pool2d expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    ho = _out_extent(h, k, stride, pad, "max_pool2d", x.shape)
    wo = _out_extent(w, k, stride, pad, "max_pool2d", x.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    out = np.full((c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((c, ho, wo), dtype=np.int32)
    for i in range(k):
        for j in range(k):
            win = _window(xp, i, j, ho, wo, stride)
            better = win > out
            out = np.where(better, win, out)
            arg[better] = i * k + j

    def rule(g):
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                _window(gxp, i, j, ho, wo, stride)[...] += np.where(arg == i * k + j, g, 0)
        return (gxp[:, pad:pad + h, pad:pad + w] if pad else gxp,)

    return make_result(out, (x,), rule)


def global_avg_pool(x) -> Tensor:
    """``[C,H,W] -> [C]`` per-channel mean."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    return x.mean(axis=(1, 2))


def avg_pool_axis(x, axis: str) -> Tensor:
    """Mean along one spatial axis: ``'H'`` gives ``[C,1,W]``, ``'W'`` gives ``[C,H,1]``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool_axis expects [C,H,W], got {x.shape}")
    if axis not in ("H", "W"):
        raise ValueError(f"axis must be 'H' or 'W', got {axis!r}")
    return x.mean(axis=1 if axis == "H" else 2, keepdims=True)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    c, h, w = x.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def rule(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return make_result(out, (x,), rule)


# ---------------------------------------------------------------------------
# Softmax and activations
# ---------------------------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), rule)


def _unary(x, fwd, dfn) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)
    return make_result(out, (x,), lambda g: (g * dfn(x.data, out),))


def sigmoid(x) -> Tensor:
    def fwd(a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    return _unary(x, fwd, lambda a, s: s * (1 - s))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda a, t: 1 - t * t)


def relu(x) -> Tensor:
    return _unary(x, lambda a: np.maximum(a, 0), lambda a, o: (a > 0).astype(a.dtype))


def relu6(x) -> Tensor:
    return _unary(x, lambda a: np.clip(a, 0, 6), lambda a, o: ((a > 0) & (a < 6)).astype(a.dtype))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = sigmoid(x.data).data
    out = x.data * s
    return make_result(out, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    inv_sqrt2pi = 1.0 / np.sqrt(2.0 * np.pi)

    def fwd(a):
        return (0.5 * a * (1.0 + erf(a * inv_sqrt2))).astype(a.dtype)

    def dfn(a, o):
        cdf = 0.5 * (1.0 + erf(a * inv_sqrt2))
        return (cdf + a * inv_sqrt2pi * np.exp(-0.5 * a * a)).astype(a.dtype)

    return _unary(x, fwd, dfn)


def softplus(x) -> Tensor:
    def fwd(a):
        return np.logaddexp(0, a).astype(a.dtype)

    return _unary(x, fwd, lambda a, o: sigmoid(a).data)


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------
def to_pixel(u, extent: int):
    """Normalized coordinate in [-1, 1] to pixel index (cell centres at integers)."""
    return ((u + 1.0) * extent - 1.0) / 2.0


def grid_sample(fmap, points) -> Tensor:
    """Bilinearly sample ``fmap[C,H,W]`` at ``points[N,2]`` given as normalized ``(u, v)``.

    ``u`` runs along W and ``v`` along H. Neighbours outside the map read as
    zero. Returns ``[N, C]``.
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    if fmap.ndim != 3 or fmap.size == 0:
        raise ShapeError(f"grid_sample expects a non-empty [C,H,W] map, got {fmap.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"grid_sample expects points [N,2], got {points.shape}")
    c, h, w = fmap.shape
    f = fmap.data
    px = to_pixel(points.data[:, 0], w)
    py = to_pixel(points.data[:, 1], h)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
        vals = np.where(valid[:, None], f[:, yc, xc].T, 0)
        wx = fx if dx else 1 - fx
        wy = fy if dy else 1 - fy
        corners.append((dx, dy, xc, yc, valid, vals, wx, wy))

    out = sum(((wx * wy)[:, None] * vals for _, _, _, _, _, vals, wx, wy in corners))
    out = np.asarray(out, dtype=f.dtype)

    def rule(g):
        gf = np.zeros_like(f) if fmap.requires_grad else None
        gpx = np.zeros(len(px), dtype=g.dtype)
        gpy = np.zeros(len(py), dtype=g.dtype)
        for dx, dy, xc, yc, valid, vals, wx, wy in corners:
            if gf is not None:
                contrib = (g * (wx * wy * valid)[:, None]).T
                np.add.at(gf, (slice(None), yc, xc), contrib)
            gv = (g * vals).sum(axis=1)
            gpx += gv * wy * (1 if dx else -1)
            gpy += gv * wx * (1 if dy else -1)
        gpts = np.stack([gpx * (w / 2.0), gpy * (h / 2.0)], axis=1).astype(points.dtype)
        return gf, gpts

    return make_result(out, (fmap, points), rule)


def bilinear_sample(fmap, point: Tuple[float, float]) -> Tensor:
    """Sample a single normalized point; returns ``[C]``."""
    pts = point if isinstance(point, Tensor) else Tensor(np.asarray([point], dtype=np.float64))
    if pts.ndim == 1:
        pts = pts.reshape(1, 2)
    return grid_sample(fmap, pts)[0]
