"""CloudAdapterNet: frozen backbone + spatial perception + adapting module + decode head."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapter import AdaptingModule, adapter_param_shapes, flatten_context
from .backbone import FrozenBackbone, backbone_param_shapes
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module
from .spm import SpatialPerception, aggregate, spm_param_shapes

HEAD_CHANNELS = 32


def interaction_schedule(n, depth):
    """Evenly spaced layer indices ``0, depth/n, 2*depth/n, ...``."""
    if not 1 <= n <= depth:
        raise ConfigError(f"interaction count {n} must lie in [1, {depth}]")
    if depth % n:
        raise ConfigError(f"interaction count {n} does not divide depth {depth}")
    step = depth // n
    return list(range(0, depth, step))


def concat_channels(cfg):
    """Extra head input channels routed from the spatial module when adapting is off."""
    comps = cfg.components
    if comps.use_adapting or not comps.use_stem:
        return 0
    return cfg.spm.context_channels if comps.use_blocks else cfg.spm.stem_channels


def head_param_shapes(in_channels, num_classes, hidden=HEAD_CHANNELS):
    return {
        "proj.weight": (hidden, in_channels, 1, 1),
        "proj.bias": (hidden,),
        "classifier.weight": (num_classes, hidden, 3, 3),
        "classifier.bias": (num_classes,),
    }


def _count(shapes):
    return int(sum(int(np.prod(s)) for s in shapes.values()))


@dataclass
class ParamReport:
    trainable: int
    frozen: int
    per_module: dict = field(default_factory=dict)

    @property
    def percent(self):
        return 100.0 * self.trainable / self.frozen if self.frozen else float("inf")

    @property
    def millions(self):
        return self.trainable / 1e6

    def __str__(self):
        return f"{self.millions:.2f}M ({self.percent:.1f}%)"


def param_report(cfg: ModelConfig, include_head=False):
    """Trainable/frozen counts from shape tables alone (nothing is allocated)."""
    cfg.validate()
    bb = cfg.backbone
    per = {}
    if cfg.components.use_stem:
        per["spm"] = _count(spm_param_shapes(cfg.spm, bb.in_channels, cfg.components.use_blocks))
    else:
        per["spm"] = 0
    per["aggregator"] = 0
    if cfg.components.use_adapting:
        a = cfg.adapter
        per["adapter"] = _count(adapter_param_shapes(
            bb.embed_dim, cfg.spm.context_channels, a.rank, cfg.interaction_count, a.share_weights, a.query_rank))
    else:
        per["adapter"] = 0
    if include_head:
        per["head"] = _count(head_param_shapes(bb.embed_dim + concat_channels(cfg), cfg.num_classes))
    return ParamReport(sum(per.values()), _count(backbone_param_shapes(bb)), per)


class DecodeHead(Module):
    """1x1 conv on the token grid, bilinear upsample to full size, GELU, 3x3 conv to class logits."""

    def __init__(self, rng, in_channels, num_classes, hidden=HEAD_CHANNELS):
        super().__init__()
        self.proj = Conv2d(rng, in_channels, hidden, 1)
        self.classifier = Conv2d(rng, hidden, num_classes, 3, padding=1)

    def forward(self, grid, out_h, out_w):
        f = T.upsample_bilinear(self.proj(grid), out_h, out_w)
        return self.classifier(T.gelu(f))


def _resize(f, h, w):
    fh, fw = f.shape[2:]
    if fh >= h and fw >= w:
        return T.adaptive_avg_pool2d(f, h, w)
    if fh <= h and fw <= w:
        return T.upsample_bilinear(f, h, w)
    raise DimensionError(f"cannot resize {fh}x{fw} to {h}x{w}")


class CloudAdapterNet(Module):
    def __init__(self, cfg: ModelConfig, seed=42):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        bb = cfg.backbone
        comps = cfg.components
        self.backbone = FrozenBackbone(bb, seed)
        self.spm = SpatialPerception(cfg.spm, bb.in_channels, seed, comps.use_blocks) if comps.use_stem else None
        if comps.use_adapting:
            a = cfg.adapter
            self.adapter = AdaptingModule(bb.embed_dim, cfg.spm.context_channels, a.rank, cfg.interaction_count,
                                          a.share_weights, a.query_rank, seed)
            self.schedule = interaction_schedule(cfg.interaction_count, bb.depth)
        else:
            self.adapter = None
            self.schedule = []
        rng = np.random.default_rng([seed, 3])
        self.head = DecodeHead(rng, bb.embed_dim + concat_channels(cfg), cfg.num_classes)

    def context(self, x):
        """Context tokens ``[N, M, C_k]`` for the adapter according to the strategy."""
        _, feats = self.spm.features(x)
        strategy = self.cfg.strategy
        if strategy == "aggregated":
            ctx = aggregate(feats)
        elif strategy == "single_scale":
            ctx = feats[-1]
        else:
            hk, wk = feats[-1].shape[2:]
            ctx = T.concat([flatten_context(T.adaptive_avg_pool2d(f, hk, wk)) for f in feats], axis=1)
        return ctx

    def _spm_grid_features(self, x, gh, gw):
        stem_out, feats = self.spm.features(x)
        comps = self.cfg.components
        if not comps.use_blocks:
            f = stem_out
        elif comps.use_aggregator:
            f = aggregate(feats)
        else:
            f = feats[-1]
        return _resize(f, gh, gw)

    def tokens_to_grid(self, tokens):
        n, t, d = tokens.shape
        g = self.cfg.backbone.grid
        return tokens.transpose(0, 2, 1).reshape(n, d, g, g)

    def forward(self, x, adapt=True):
        """Per-pixel class logits ``[N, num_classes, H, W]``.

        ``adapt=False`` skips the adapting module and runs the plain backbone.
        """
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        n, _, h, w = x.shape
        hook = None
        if adapt and self.adapter is not None:
            k, v = self.adapter.context(self.context(x))
            point_of = {j: i for i, j in enumerate(self.schedule)}

            def hook(j, feat):
                return self.adapter.adapt_projected(feat, k, v, point_of[j])

        tokens, _ = self.backbone.forward_with_hooks(x, hook, self.schedule)
        grid = self.tokens_to_grid(tokens)
        if concat_channels(self.cfg):
            g = self.cfg.backbone.grid
            grid = T.concat([grid, self._spm_grid_features(x, g, g)], axis=1)
        return self.head(grid, h, w)

    def concat_fallback_forward(self, x):
        if self.cfg.components.use_adapting:
            raise ConfigError("concat fallback is only wired when the adapting module is disabled")
        return self.forward(x)

    def count_params(self, include_head=True):
        """Counts by trainability flag over the instantiated parameters."""
        per = {
            "spm": self.spm.num_params(trainable=True) if self.spm is not None else 0,
            "aggregator": 0,
            "adapter": self.adapter.num_params(trainable=True) if self.adapter is not None else 0,
        }
        if include_head:
            per["head"] = self.head.num_params(trainable=True)
        frozen = sum(p.size for p in self.parameters() if not p.requires_grad)
        return ParamReport(sum(per.values()), frozen, per)

    def trainable_named(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def frozen_named(self):
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    def predict(self, x):
        with T.no_grad():
            logits = self.forward(x)
        return logits.data.argmax(axis=1).astype(np.int64)
