"""ResNet-14 and its attention-augmented twin ARes-14."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .aaconv import AAConv2d, AAConvConfig
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import ConfigError, ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    attention: bool = True
    stage_channels: tuple[int, ...] = (64, 128, 256)
    blocks_per_stage: int = 2
    nh: int = 8
    k_ratio: float = 0.25
    v_ratio: float = 0.25
    input_channels: int = 3
    input_extent: tuple[int, int] = (112, 112)
    stem_channels: int | None = None  # defaults to stage_channels[0]
    augment_shortcuts: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_extent", tuple(int(e) for e in self.input_extent))

    @property
    def feature_width(self) -> int:
        return self.stage_channels[-1]

    def stage_extents(self) -> list[tuple[int, int]]:
        """Output extent of each stage, traced through the stem and the strides."""
        h, w = self.input_extent
        h, w = ops.out_extent(h, 7, 2, 3), ops.out_extent(w, 7, 2, 3)
        h, w = ops.out_extent(h, 3, 2, 1), ops.out_extent(w, 3, 2, 1)
        extents = []
        for s in range(len(self.stage_channels)):
            if s > 0:
                h, w = ops.out_extent(h, 3, 2, 1), ops.out_extent(w, 3, 2, 1)
            extents.append((h, w))
        return extents

    def validate(self) -> None:
        if len(self.stage_channels) != 3:
            raise ConfigError("exactly three stages are required")
        if self.blocks_per_stage < 1 or self.input_channels < 1:
            raise ConfigError("blocks_per_stage and input_channels must be positive")
        h, w = self.input_extent
        if h < 8 or w < 8:
            raise ConfigError(f"input extent {self.input_extent} too small for the stem")


def conv_layer(c_in: int, c_out: int, stride: int, extent: tuple[int, int], cfg: BackboneConfig,
               rng: np.random.Generator, dtype) -> Module:
    """3x3 convolution, attention-augmented when the backbone asks for it."""
    if cfg.attention:
        acfg = AAConvConfig(c_in, c_out, 3, stride, cfg.k_ratio, cfg.v_ratio, cfg.nh)
        return AAConv2d(acfg, extent, rng=rng, dtype=dtype)
    return Conv2d(c_in, c_out, 3, stride, rng=rng, dtype=dtype)


class BasicBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, extent: tuple[int, int], cfg: BackboneConfig,
                 rng: np.random.Generator, dtype=np.float64):
        self.conv1 = conv_layer(c_in, c_out, stride, extent, cfg, rng, dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        out_extent = (ops.out_extent(extent[0], 3, stride, 1), ops.out_extent(extent[1], 3, stride, 1))
        self.conv2 = conv_layer(c_out, c_out, 1, out_extent, cfg, rng, dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            if cfg.augment_shortcuts and cfg.attention:
                acfg = AAConvConfig(c_in, c_out, 1, stride, cfg.k_ratio, cfg.v_ratio, cfg.nh)
                self.shortcut = AAConv2d(acfg, extent, rng=rng, dtype=dtype)
            else:
                self.shortcut = Conv2d(c_in, c_out, 1, stride, padding=0, rng=rng, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(c_out, dtype=dtype)
        else:
            self.shortcut = None
            self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return ops.relu(ops.add(out, short))


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None, dtype=np.float64):
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        stem = config.stem_channels or config.stage_channels[0]
        self.stem_conv = Conv2d(config.input_channels, stem, 7, 2, 3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(stem, dtype=dtype)
        blocks = []
        c_in = stem
        extents = config.stage_extents()
        for s, c_out in enumerate(config.stage_channels):
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                block_in = extents[s - 1] if (s > 0 and b == 0) else extents[s]
                blocks.append(BasicBlock(c_in, c_out, stride, block_in, config, rng, dtype))
                c_in = c_out
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        return backbone_forward(self, x)

    def conv_layers(self) -> list[Module]:
        """Stem conv followed by each block's two 3x3 layers, in forward order."""
        layers: list[Module] = [self.stem_conv]
        for block in self.blocks:
            layers += [block.conv1, block.conv2]
        return layers

    def aaconv_layers(self) -> list[AAConv2d]:
        return [m for m in self.modules() if isinstance(m, AAConv2d)]


def backbone_forward(backbone: Backbone, image: Tensor) -> Tensor:
    cfg = backbone.config
    if image.ndim != 4 or image.shape[1] != cfg.input_channels or tuple(image.shape[2:]) != cfg.input_extent:
        raise ShapeError(
            f"backbone expects (N, {cfg.input_channels}, {cfg.input_extent[0]}, {cfg.input_extent[1]}), "
            f"got {image.shape}"
        )
    x = ops.relu(backbone.stem_bn(backbone.stem_conv(image)))
    x = ops.max_pool2d(x, 3, 2, 1)
    for block in backbone.blocks:
        x = block(x)
    return ops.global_avg_pool(x)


def build_backbone(config: BackboneConfig, rng: np.random.Generator | None = None, dtype=np.float64) -> Backbone:
    return Backbone(config, rng=rng, dtype=dtype)


def count_layers(backbone: Backbone) -> int:
    """Stem conv + block convs + the prediction layer position; shortcuts excluded."""
    return 1 + 2 * len(backbone.blocks) + 1
