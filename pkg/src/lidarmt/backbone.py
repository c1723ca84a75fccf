"""Encoder-decoder sparse backbone: multi-scale 3D encoder, BEV projection
helpers, the 2D multi-scale BEV extractor, the U-Net style voxel decoder
restricted to encoder coordinates, and the auxiliary segmentation head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .sparse import (DenseBEVMap, SparseVoxelTensor, CoordinateError,
                     submanifold_conv3d, strided_conv3d, upsample_conv3d)


@dataclass
class BackboneConfig:
    base_channels: int = 32
    stage_multipliers: tuple = (1, 2, 4, 4)
    convs_per_stage: int = 2
    bev_levels: int = 2  # down/up levels in the 2D extractor

    def __post_init__(self):
        if len(self.stage_multipliers) != 4:
            raise ValueError("four stages are required for the 1/8 bottleneck")

    @property
    def stage_widths(self) -> tuple:
        return tuple(self.base_channels * m for m in self.stage_multipliers)


@dataclass
class ConvUnit:
    kernel: ad.Tensor  # (3, 3, 3, Cin, Cout)
    bias: ad.Tensor


@dataclass
class Conv2dUnit:
    weight: ad.Tensor  # (Cout, Cin, kh, kw)
    bias: ad.Tensor


@dataclass
class LinearUnit:
    weight: ad.Tensor  # (Cin, Cout)
    bias: ad.Tensor


def conv3d_unit(rng, cin, cout):
    scale = np.sqrt(2.0 / (27 * cin))
    return ConvUnit(kernel=ad.parameter(rng.normal(0, scale, size=(3, 3, 3, cin, cout))),
                    bias=ad.parameter(np.zeros(cout)))


def conv2d_unit(rng, cin, cout, k=3):
    scale = np.sqrt(2.0 / (k * k * cin))
    return Conv2dUnit(weight=ad.parameter(rng.normal(0, scale, size=(cout, cin, k, k))),
                      bias=ad.parameter(np.zeros(cout)))


def linear_unit(rng, cin, cout, scale=None):
    scale = np.sqrt(1.0 / cin) if scale is None else scale
    return LinearUnit(weight=ad.parameter(rng.normal(0, scale, size=(cin, cout))),
                      bias=ad.parameter(np.zeros(cout)))


@dataclass
class EncoderParams:
    stages: list = field(default_factory=list)  # list of [ConvUnit, ConvUnit]
    downs: list = field(default_factory=list)   # 3 strided ConvUnits


@dataclass
class DecoderParams:
    ups: list = field(default_factory=list)     # coarse -> fine ConvUnits
    fuses: list = field(default_factory=list)   # post-concat ConvUnits


@dataclass
class BevExtractorParams:
    pre: Conv2dUnit
    down: Conv2dUnit
    mid: Conv2dUnit
    up: Conv2dUnit
    fuse: Conv2dUnit


def init_encoder(cfg: BackboneConfig, in_channels: int,
                 rng: np.random.Generator) -> EncoderParams:
    p = EncoderParams()
    widths = cfg.stage_widths
    prev = in_channels
    for s, w in enumerate(widths):
        stage = []
        cin = prev
        for _ in range(cfg.convs_per_stage):
            stage.append(conv3d_unit(rng, cin, w))
            cin = w
        p.stages.append(stage)
        if s < 3:
            p.downs.append(conv3d_unit(rng, w, widths[s + 1]))
        prev = widths[s + 1] if s < 3 else w
    return p


def init_decoder(cfg: BackboneConfig, injected_channels: int,
                 rng: np.random.Generator) -> DecoderParams:
    p = DecoderParams()
    widths = cfg.stage_widths
    prev = injected_channels
    for lvl in (2, 1, 0):
        p.ups.append(conv3d_unit(rng, prev, widths[lvl]))
        p.fuses.append(conv3d_unit(rng, 2 * widths[lvl], widths[lvl]))
        prev = widths[lvl]
    return p


def init_bev_extractor(channels: int, rng: np.random.Generator) -> BevExtractorParams:
    c = channels
    return BevExtractorParams(
        pre=conv2d_unit(rng, c, c),
        down=conv2d_unit(rng, c, 2 * c),
        mid=conv2d_unit(rng, 2 * c, 2 * c),
        up=conv2d_unit(rng, 2 * c, c),
        fuse=conv2d_unit(rng, 2 * c, c),
    )


def _act(t: SparseVoxelTensor) -> SparseVoxelTensor:
    return t.with_features(ad.relu(ad.layer_norm(t.features)))


def channel_norm(x: ad.Tensor) -> ad.Tensor:
    """Per-pixel normalization over the channel axis of (C, H, W)."""
    return ad.transpose(ad.layer_norm(ad.transpose(x, (1, 2, 0))), (2, 0, 1))


def encode(t: SparseVoxelTensor, p: EncoderParams) -> list[SparseVoxelTensor]:
    """Four scales at 1, 1/2, 1/4, 1/8 resolution (2 submanifold convs per
    stage, one strided conv between stages)."""
    scales = []
    x = t
    for s, stage in enumerate(p.stages):
        for conv in stage:
            x = _act(submanifold_conv3d(x, conv.kernel, conv.bias))
        scales.append(x)
        if s < 3:
            down = p.downs[s]
            x = _act(strided_conv3d(x, down.kernel, down.bias))
    return scales


def decode(scales: list[SparseVoxelTensor], injected: SparseVoxelTensor,
           p: DecoderParams) -> SparseVoxelTensor:
    """Upsample the injected 1/8 tensor back to full resolution along the
    encoder's coordinate sets, concatenating skip features at each scale."""
    if injected.spatial_shape != scales[3].spatial_shape or \
            len(injected) != len(scales[3]) or \
            not np.array_equal(injected.coords, scales[3].coords):
        raise CoordinateError("injected tensor must sit on the encoder's 1/8 coords")
    x = injected
    for i, lvl in enumerate((2, 1, 0)):
        skip = scales[lvl]
        up = upsample_conv3d(x, skip.coords, skip.spatial_shape,
                             p.ups[i].kernel, p.ups[i].bias)
        up = _act(up)
        merged = up.with_features(ad.concat([up.features, skip.features], axis=1))
        x = _act(submanifold_conv3d(merged, p.fuses[i].kernel, p.fuses[i].bias))
    return x


def bev_extract(bev: DenseBEVMap, p: BevExtractorParams) -> DenseBEVMap:
    """2-level down/up 2D pyramid with a skip concatenation; shape-preserving."""
    x = bev.features
    _c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("BEV extent must be even for the 2-level pyramid")
    c1 = ad.relu(channel_norm(ad.conv2d(x, p.pre.weight, p.pre.bias)))
    d = ad.relu(channel_norm(ad.conv2d(c1, p.down.weight, p.down.bias, stride=2)))
    d = ad.relu(channel_norm(ad.conv2d(d, p.mid.weight, p.mid.bias)))
    u = ad.relu(channel_norm(ad.conv2d(ad.upsample2x(d), p.up.weight, p.up.bias)))
    fused = ad.conv2d(ad.concat([c1, u], axis=0), p.fuse.weight, p.fuse.bias)
    return DenseBEVMap(features=fused, n_heights=bev.n_heights,
                       downsample=bev.downsample)


def aux_seg_head(features: ad.Tensor, head: LinearUnit) -> ad.Tensor:
    """K-way logits per feature row."""
    return features @ head.weight + head.bias
