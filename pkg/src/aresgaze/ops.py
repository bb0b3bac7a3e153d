"""Forward operations and their gradient rules.

Image tensors use the (batch, channels, height, width) layout. Every function
takes and returns :class:`~aresgaze.tensor.Tensor` and records itself on the
active tape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, ShapeError, Tensor, record


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _channel_sum(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Per-channel sum over N, H, W of ``a`` (or of ``a * b``)."""
    if b is None:
        return np.einsum("nchw->c", a)
    return np.einsum("nchw,nchw->c", a, b)


def out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# elementwise / structural ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, grad_fn)


def mul(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    if out.size != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def grad_fn(g):
        return (g.transpose(inv),)

    return record("transpose", (x,), out, grad_fn)


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), np.asarray(x.data.sum()), grad_fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return record("mean", (x,), np.asarray(x.data.mean()), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (no broadcasting of batch axes)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return record("matmul", (a, b), out, grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop].copy()

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record("slice_channels", (x,), out, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return record("concat_channels", (a, b), out, grad_fn)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot concatenate features {a.shape} and {b.shape}")
    fa = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def grad_fn(g):
        return g[:, :fa], g[:, fa:]

    return record("concat_features", (a, b), out, grad_fn)


# activations ----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def grad_fn(g):
        return (g * mask,)

    return record("relu", (x,), out, grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, grad_fn)


# dense layers ---------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", inputs, out, grad_fn)


def _pad_hw(a: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation (no kernel flip), via patch-matrix expansion."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and (Cout, Cin, kH, kW) weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be positive and padding non-negative")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    ho = out_extent(h, kh, stride, padding)
    wo = out_extent(w, kw, stride, padding)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        w2 = weight.data[:, :, 0, 0]
        xf = xs.reshape(n, cin, ho * wo)
        out = np.matmul(w2, xf).reshape(n, cout, ho, wo)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def grad_fn(g):
            gf = g.reshape(n, cout, ho * wo)
            gx_s = np.matmul(w2.T, gf).reshape(n, cin, ho, wo)
            if stride == 1:
                gx = gx_s
            else:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gx_s
            gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            grads = [gx, gw]
            if bias is not None:
                grads.append(_channel_sum(g))
            return grads
    else:
        xp = _pad_hw(x.data, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # cols: (N, Ho, Wo, Cin*kh*kw)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
        wmat = weight.data.reshape(cout, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def grad_fn(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (g2.T @ cols).reshape(weight.shape)
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            grads = [gx, gw]
            if bias is not None:
                grads.append(_channel_sum(g))
            return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, grad_fn)


# normalization ----------------------------------------------------------------

class BatchNormState:
    """Running per-channel statistics carried between calls."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma/beta must have shape ({c},)")
    gm = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm2d: training needs at least two values per channel (degenerate variance)")
        mean = _channel_sum(x.data) / m
        centered = x.data - mean[None, :, None, None]
        var = _channel_sum(centered, centered) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv[None, :, None, None]
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * m / (m - 1)

        def grad_fn(g):
            gxhat = g * gm
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - _channel_sum(gxhat)[None, :, None, None]
                - xhat * _channel_sum(gxhat, xhat)[None, :, None, None]
            )
            return gx, _channel_sum(g, xhat), _channel_sum(g)
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def grad_fn(g):
            return g * gm * inv[None, :, None, None], _channel_sum(g, xhat), _channel_sum(g)

    out = (xhat * gm + beta.data[None, :, None, None]).astype(x.dtype)
    return record("batch_norm2d", (x, gamma, beta), out, grad_fn)


# pooling --------------------------------------------------------------------

def max_pool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    if window < 1 or stride < 1:
        raise ShapeError("max_pool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if h + 2 * padding < window or w + 2 * padding < window:
        raise ShapeError(f"max_pool2d: window {window} larger than padded input {h}x{w}")
    ho = out_extent(h, window, stride, padding)
    wo = out_extent(w, window, stride, padding)
    xp = _pad_hw(x.data, padding, -np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    # argmax returns the first maximal element in row-major scan order
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn_, cc, rows, cols), g)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx,)

    return record("max_pool2d", (x,), np.ascontiguousarray(out), grad_fn)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None, ceil_mode: bool = False) -> Tensor:
    """Non-overlapping mean pooling (stride must equal window).

    With ``ceil_mode`` an indivisible extent gets a trailing partial window,
    averaged over the elements it actually covers.
    """
    stride = window if stride is None else stride
    if stride != window:
        raise ShapeError("avg_pool2d supports stride == window only")
    n, c, h, w = x.shape
    if not ceil_mode and (h % window or w % window):
        raise ShapeError(f"avg_pool2d: extent {h}x{w} not divisible by window {window}")
    ho, wo = -(-h // window), -(-w // window)
    hp, wp = ho * window, wo * window
    xp = x.data
    if (hp, wp) != (h, w):
        xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        xp[:, :, :h, :w] = x.data
    counts = np.zeros((hp, wp))
    counts[:h, :w] = 1
    counts = counts.reshape(ho, window, wo, window).sum(axis=(1, 3))
    out = xp.reshape(n, c, ho, window, wo, window).sum(axis=(3, 5)) / counts

    def grad_fn(g):
        gs = (g / counts).astype(x.dtype)
        full = np.repeat(np.repeat(gs, window, axis=2), window, axis=3)
        return (np.ascontiguousarray(full[:, :, :h, :w]),)

    return record("avg_pool2d", (x,), out.astype(x.dtype), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return record("global_avg_pool", (x,), out, grad_fn)


# losses -----------------------------------------------------------------------

def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean over all components of 0.5*d^2 (|d| < 1) or |d| - 0.5 (otherwise)."""
    target = _t(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < 1
    per = np.where(small, 0.5 * d * d, ad - 0.5)
    k = d.size

    def grad_fn(g):
        gd = np.where(small, d, np.sign(d)) * (g / k)
        return gd, -gd

    return record("smooth_l1", (pred, target), np.asarray(per.mean()), grad_fn)


__all__ = [
    "BatchNormState",
    "ConfigError",
    "add",
    "avg_pool2d",
    "batch_norm2d",
    "concat_channels",
    "concat_features",
    "conv2d",
    "global_avg_pool",
    "linear",
    "matmul",
    "max_pool2d",
    "mean_all",
    "mul",
    "out_extent",
    "relu",
    "reshape",
    "slice_channels",
    "smooth_l1",
    "softmax",
    "sum_all",
    "transpose",
]
