"""Attention-augmented 2D convolution.

A regular convolution producing ``f_out - dv`` channels runs alongside a
multi-head self-attention over all spatial positions producing ``dv``
channels; the two maps are concatenated along channels. Attention logits get
a 2D relative-position term so that they depend on key/query displacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, Module, parameter
from .tensor import ConfigError, ContractError, ShapeError, Tensor, record


@dataclass(frozen=True)
class AAConvConfig:
    f_in: int
    f_out: int
    kernel: int = 3
    stride: int = 1
    k_ratio: float = 0.25  # fraction of f_out given to the attention path (dv)
    v_ratio: float = 0.25  # key depth as a fraction of f_out (dk)
    nh: int = 8

    @property
    def dv(self) -> int:
        return int(round(self.k_ratio * self.f_out))

    @property
    def dk(self) -> int:
        return int(round(self.v_ratio * self.f_out))

    @property
    def conv_channels(self) -> int:
        return self.f_out - self.dv

    @property
    def dkh(self) -> int:
        return self.dk // self.nh

    @property
    def dvh(self) -> int:
        return self.dv // self.nh

    def validate(self) -> None:
        if self.kernel % 2 == 0 or self.stride < 1 or self.nh < 1:
            raise ConfigError(f"invalid kernel/stride/nh in {self}")
        if not (0 < self.k_ratio < 1 and 0 < self.v_ratio < 1):
            raise ConfigError("k_ratio and v_ratio must lie in (0, 1)")
        for label, value in (("attention channels dv", self.dv), ("key depth dk", self.dk)):
            if value < self.nh or value % self.nh:
                raise ConfigError(f"{label}={value} must be >= nh={self.nh} and divisible by it")
        if self.conv_channels < 1:
            raise ConfigError(f"no channels left for the convolution path (f_out={self.f_out}, dv={self.dv})")


def relative_indices(n: int) -> np.ndarray:
    """``idx[a, b] = b - a + n - 1``: table row for a key at b seen from a query at a."""
    a = np.arange(n)
    return a[None, :] - a[:, None] + n - 1


def relative_logits(q: Tensor, rel_w: Tensor, rel_h: Tensor, height: int, width: int) -> Tensor:
    """Relative-position logits ``(N, nh, H*W, H*W)``.

    Entry for query (i, j) and key (l, m) is
    ``q_ij . rel_w[m - j + W - 1] + q_ij . rel_h[l - i + H - 1]``.
    ``q`` has shape ``(N, nh, H*W, d)`` with positions in row-major order.
    """
    n, nh, hw, d = q.shape
    if hw != height * width:
        raise ShapeError(f"query has {hw} positions, expected {height}x{width}")
    if rel_w.shape != (2 * width - 1, d) or rel_h.shape != (2 * height - 1, d):
        raise ConfigError(
            f"relative tables {rel_w.shape}/{rel_h.shape} do not match extent {height}x{width} and depth {d}"
        )
    idx_w = relative_indices(width)
    idx_h = relative_indices(height)
    ew = rel_w.data[idx_w]  # (W, W, d): [j, m]
    eh = rel_h.data[idx_h]  # (H, H, d): [i, l]
    q5 = q.data.reshape(n, nh, height, width, d)
    # width term batched over key-column j: (j, n*nh*i, d) @ (j, d, m)
    qj = q5.transpose(3, 0, 1, 2, 4).reshape(width, n * nh * height, d)
    lw = np.matmul(qj, ew.transpose(0, 2, 1)).reshape(width, n, nh, height, width).transpose(1, 2, 3, 0, 4)
    # height term batched over query-row i: (i, n*nh*j, d) @ (i, d, l)
    qi = q5.transpose(2, 0, 1, 3, 4).reshape(height, n * nh * width, d)
    lh = np.matmul(qi, eh.transpose(0, 2, 1)).reshape(height, n, nh, width, height).transpose(1, 2, 0, 3, 4)
    out = lh[..., :, None] + lw[..., None, :]  # (n, nh, i, j, l, m)
    out = out.reshape(n, nh, hw, hw)

    def grad_fn(g):
        g6 = g.reshape(n, nh, height, width, height, width)
        gw = g6.sum(axis=4)  # over l -> [n, h, i, j, m]
        gh = g6.sum(axis=5)  # over m -> [n, h, i, j, l]
        gwj = gw.transpose(3, 0, 1, 2, 4).reshape(width, n * nh * height, width)
        ghi = gh.transpose(2, 0, 1, 3, 4).reshape(height, n * nh * width, height)
        gqj = np.matmul(gwj, ew).reshape(width, n, nh, height, d).transpose(1, 2, 3, 0, 4)
        gqi = np.matmul(ghi, eh).reshape(height, n, nh, width, d).transpose(1, 2, 0, 3, 4)
        gq = gqj + gqi
        gew = np.matmul(gwj.transpose(0, 2, 1), qj)  # (j, m, d)
        geh = np.matmul(ghi.transpose(0, 2, 1), qi)  # (i, l, d)
        grw = np.zeros_like(rel_w.data)
        grh = np.zeros_like(rel_h.data)
        np.add.at(grw, idx_w, gew)
        np.add.at(grh, idx_h, geh)
        return gq.reshape(q.shape), grw, grh

    return record("relative_logits", (q, rel_w, rel_h), out, grad_fn)


def _split_heads(x: Tensor, nh: int) -> Tensor:
    """(N, C, H, W) -> (N, nh, H*W, C/nh); head k owns channels [k*C/nh, (k+1)*C/nh)."""
    n, c, h, w = x.shape
    return x.reshape(n, nh, c // nh, h * w).transpose(0, 1, 3, 2)


def qkv_projection(x: Tensor, layer: "AAConv2d") -> tuple[Tensor, Tensor, Tensor]:
    cfg = layer.config
    qkv = ops.conv2d(x, layer.qkv_weight)
    q = ops.slice_channels(qkv, 0, cfg.dk)
    k = ops.slice_channels(qkv, cfg.dk, 2 * cfg.dk)
    v = ops.slice_channels(qkv, 2 * cfg.dk, 2 * cfg.dk + cfg.dv)
    q = ops.mul(_split_heads(q, cfg.nh), cfg.dkh ** -0.5)
    return q, _split_heads(k, cfg.nh), _split_heads(v, cfg.nh)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, rel: Tensor | None, mix_weight: Tensor,
                         height: int, width: int) -> tuple[Tensor, Tensor]:
    """Per head ``softmax(q k^T + rel) v``; heads concatenated and mixed by a 1x1 conv.

    Returns the attended map ``(N, dv, H, W)`` and the attention weights
    ``(N, nh, H*W, H*W)``.
    """
    logits = ops.matmul(q, k.transpose(0, 1, 3, 2))
    if rel is not None:
        logits = ops.add(logits, rel)
    weights = ops.softmax(logits, axis=-1)
    att = ops.matmul(weights, v)  # (N, nh, HW, dvh)
    n, nh, hw, dvh = att.shape
    att = att.transpose(0, 1, 3, 2).reshape(n, nh * dvh, height, width)
    return ops.conv2d(att, mix_weight), weights


def downsample_attention(att: Tensor, stride: int) -> Tensor:
    """Bring the full-resolution attention map to the strided conv extent."""
    if stride == 1:
        return att
    return ops.avg_pool2d(att, stride, stride, ceil_mode=True)


class AAConv2d(Module):
    """Attention-augmented convolution bound to one input extent ``(H, W)``."""

    def __init__(self, config: AAConvConfig, extent: tuple[int, int], rng: np.random.Generator | None = None,
                 dtype=np.float64):
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.extent = (int(extent[0]), int(extent[1]))
        h, w = self.extent
        c = config
        self.conv = Conv2d(c.f_in, c.conv_channels, c.kernel, c.stride, bias=True, rng=rng, dtype=dtype)
        self.qkv_weight = parameter(
            (rng.standard_normal((2 * c.dk + c.dv, c.f_in, 1, 1)) / np.sqrt(c.f_in)).astype(dtype)
        )
        self.mix_weight = parameter((rng.standard_normal((c.dv, c.dv, 1, 1)) / np.sqrt(c.dv)).astype(dtype))
        std = c.dkh ** -0.5
        self.rel_w = parameter((rng.standard_normal((2 * w - 1, c.dkh)) * std).astype(dtype))
        self.rel_h = parameter((rng.standard_normal((2 * h - 1, c.dkh)) * std).astype(dtype))
        self.keep_attention = False
        self.last_attention: np.ndarray | None = None

    def attention_path(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h, w = self.extent
        q, k, v = qkv_projection(x, self)
        rel = relative_logits(q, self.rel_w, self.rel_h, h, w)
        return multi_head_attention(q, k, v, rel, self.mix_weight, h, w)

    def forward(self, x: Tensor) -> Tensor:
        return aaconv_forward(x, self)


def aaconv_forward(x: Tensor, layer: AAConv2d) -> Tensor:
    cfg = layer.config
    if x.ndim != 4 or x.shape[1] != cfg.f_in:
        raise ShapeError(f"AAConv expects (N, {cfg.f_in}, H, W), got {x.shape}")
    if tuple(x.shape[2:]) != layer.extent:
        raise ShapeError(f"AAConv bound to extent {layer.extent}, got {tuple(x.shape[2:])}")
    conv_out = layer.conv(x)
    att, weights = layer.attention_path(x)
    if layer.keep_attention:
        layer.last_attention = weights.data.copy()
    att = downsample_attention(att, cfg.stride)
    if att.shape[2:] != conv_out.shape[2:]:
        raise ContractError(f"path extents differ: conv {conv_out.shape[2:]} vs attention {att.shape[2:]}")
    return ops.concat_channels(conv_out, att)
