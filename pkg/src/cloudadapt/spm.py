"""Spatial perception module: separable-conv stem, stride-2 blocks, parameter-free aggregator."""

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import ChannelNorm, Conv2d, Module, ModuleList, SeparableConv2d, separable_conv_shapes


def stem_param_shapes(in_channels, stem_channels):
    shapes = separable_conv_shapes(in_channels, stem_channels, 1, "stem.expand.")
    shapes.update(separable_conv_shapes(stem_channels, stem_channels, 3, "stem.spatial."))
    return shapes


def block_param_shapes(c_in, c_out, prefix=""):
    return {
        f"{prefix}depthwise.weight": (c_in, 1, 3, 3),
        f"{prefix}depthwise.bias": (c_in,),
        f"{prefix}pointwise.weight": (c_out, c_in, 1, 1),
        f"{prefix}pointwise.bias": (c_out,),
        f"{prefix}norm.weight": (c_out,),
        f"{prefix}norm.bias": (c_out,),
    }


def spm_param_shapes(spm_cfg, in_channels=3, use_blocks=True):
    shapes = stem_param_shapes(in_channels, spm_cfg.stem_channels)
    if use_blocks:
        c = spm_cfg.stem_channels
        for i in range(spm_cfg.num_blocks):
            shapes.update(block_param_shapes(c, spm_cfg.context_channels, f"blocks.{i}."))
            c = spm_cfg.context_channels
    return shapes


class Stem(Module):
    """1x1 separable conv to widen channels, GELU, then 3x3 separable conv; keeps H x W."""

    def __init__(self, rng, in_channels, stem_channels):
        super().__init__()
        self.expand = SeparableConv2d(rng, in_channels, stem_channels, 1)
        self.spatial = SeparableConv2d(rng, stem_channels, stem_channels, 3)

    def forward(self, x):
        return self.spatial(T.gelu(self.expand(x)))


class ConvBlock(Module):
    """Pure-ConvNet block: depthwise 3x3 stride 2 -> pointwise 1x1 -> channel norm -> GELU."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.depthwise = Conv2d(rng, c_in, c_in, 3, stride=2, padding=1, groups=c_in)
        self.pointwise = Conv2d(rng, c_in, c_out, 1)
        self.norm = ChannelNorm(c_out)

    def forward(self, f):
        if f.shape[2] < 2 and f.shape[3] < 2:
            raise ContractError(f"cannot downsample a {f.shape[2]}x{f.shape[3]} map; reduce num_blocks")
        return T.gelu(self.norm(self.pointwise(self.depthwise(f))))


def aggregate(features):
    """Pool every map to the last (smallest) map's size and sum them."""
    if not features:
        raise DimensionError("aggregate needs at least one feature map")
    n, c, hk, wk = features[-1].shape
    out = None
    for f in features:
        if f.shape[0] != n or f.shape[1] != c:
            raise DimensionError(f"aggregate: feature {f.shape} does not match {features[-1].shape}")
        pooled = T.adaptive_avg_pool2d(f, hk, wk)
        out = pooled if out is None else out + pooled
    return out


class SpatialPerception(Module):
    def __init__(self, spm_cfg, in_channels=3, seed=42, use_blocks=True):
        super().__init__()
        self.cfg = spm_cfg
        rng = np.random.default_rng([seed, 1])
        self.stem = Stem(rng, in_channels, spm_cfg.stem_channels)
        blocks = []
        if use_blocks:
            c = spm_cfg.stem_channels
            for _ in range(spm_cfg.num_blocks):
                blocks.append(ConvBlock(rng, c, spm_cfg.context_channels))
                c = spm_cfg.context_channels
        self.blocks = ModuleList(blocks)

    def stem_forward(self, x):
        return self.stem(x)

    def block_forward(self, f, i):
        return self.blocks[i](f)

    def features(self, x):
        """Stem output and the list of block outputs ``F_1 .. F_k``."""
        f = self.stem(x)
        stem_out = f
        feats = []
        for blk in self.blocks:
            f = blk(f)
            feats.append(f)
        return stem_out, feats

    def forward(self, x):
        """Returns ``(F_agg, [F_1 .. F_k])``."""
        _, feats = self.features(x)
        return aggregate(feats), feats
