"""U-shaped encoder-decoder that turns an image into the shared feature map ``f_img``.

Encoder level ``i`` halves the resolution with a stride-2 3x3 convolution and
refines with a stride-1 3x3 convolution, producing ``base * 2**i`` channels.
Each decoder block upsamples with a stride-2 transposed convolution, applies a
3x3 convolution, concatenates the encoder feature of matching resolution and
passes the result through ReLU then batch normalization. The final block only
upsamples back to the input resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, relu
from .errors import ConfigurationError, DimensionError
from .params import ParameterSet, add_bn, add_conv, add_conv_transpose, bn, conv, conv_t


@dataclass
class BackboneConfig:
    levels: int = 3
    base_channels: int = 16
    out_channels: int = 32
    in_channels: int = 1
    batch_norm: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigurationError("backbone needs at least 2 levels")
        if self.out_channels < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ConfigurationError("channel counts must be positive")

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @property
    def divisor(self) -> int:
        return 2**self.levels


def build_backbone(config: BackboneConfig, seed: int | np.random.Generator = 0, ps: ParameterSet | None = None, dtype=np.float32) -> ParameterSet:
    rng = np.random.default_rng(seed)
    ps = ps if ps is not None else ParameterSet(dtype)
    chans = config.encoder_channels()
    use_bn = config.batch_norm
    cin = config.in_channels
    for i, c in enumerate(chans):
        add_conv(ps, f"encoder.{i}.down", cin, c, 3, rng, bias=not use_bn)
        if use_bn:
            add_bn(ps, f"encoder.{i}.down_bn", c)
        add_conv(ps, f"encoder.{i}.conv", c, c, 3, rng, bias=not use_bn)
        if use_bn:
            add_bn(ps, f"encoder.{i}.conv_bn", c)
        cin = c
    for j, i in enumerate(range(config.levels - 1, 0, -1)):
        c = chans[i - 1]
        add_conv_transpose(ps, f"decoder.{j}.up", cin, c, 2, 2, rng)
        add_conv(ps, f"decoder.{j}.conv", c, c, 3, rng)
        if use_bn:
            add_bn(ps, f"decoder.{j}.bn", 2 * c)
        cin = 2 * c
    add_conv_transpose(ps, "decoder.out.up", cin, config.out_channels, 2, 2, rng)
    return ps


def backbone_forward(ps: ParameterSet, x: Tensor, config: BackboneConfig, training: bool = True) -> Tensor:
    """Return ``f_img`` of shape N x out_channels x H x W."""
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise DimensionError(f"expected N x {config.in_channels} x H x W input, got {x.shape}")
    h, w = x.shape[2:]
    if h % config.divisor or w % config.divisor:
        raise DimensionError(
            f"spatial size {h}x{w} must be divisible by 2**levels = {config.divisor}"
        )
    use_bn = config.batch_norm
    skips = []
    feat = x
    for i in range(config.levels):
        feat = conv(ps, f"encoder.{i}.down", feat, stride=2, padding=1)
        if use_bn:
            feat = bn(ps, f"encoder.{i}.down_bn", feat, training)
        feat = relu(feat)
        feat = conv(ps, f"encoder.{i}.conv", feat, stride=1, padding=1)
        if use_bn:
            feat = bn(ps, f"encoder.{i}.conv_bn", feat, training)
        feat = relu(feat)
        skips.append(feat)
    for j, i in enumerate(range(config.levels - 1, 0, -1)):
        feat = conv_t(ps, f"decoder.{j}.up", feat, stride=2)
        feat = conv(ps, f"decoder.{j}.conv", feat, stride=1, padding=1)
        feat = relu(concat([feat, skips[i - 1]], axis=1))
        if use_bn:
            feat = bn(ps, f"decoder.{j}.bn", feat, training)
    return conv_t(ps, "decoder.out.up", feat, stride=2)
