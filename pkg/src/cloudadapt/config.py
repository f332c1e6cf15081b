"""Experiment configuration: dataclasses, presets, JSON loading and validation."""

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional

from .errors import ConfigError

BACKBONE_PRESETS = {
    "toy": dict(depth=4, embed_dim=64, heads=4, patch_size=4, img_size=64),
    "small-shape": dict(depth=12, embed_dim=384, heads=6, patch_size=16, img_size=512),
    "base-shape": dict(depth=12, embed_dim=768, heads=12, patch_size=16, img_size=512),
    "large-shape": dict(depth=24, embed_dim=1024, heads=16, patch_size=16, img_size=512),
    "huge-shape": dict(depth=32, embed_dim=1280, heads=16, patch_size=16, img_size=512),
}

STRATEGIES = ("aggregated", "single_scale", "multi_scale")
_STRATEGY_ALIASES = {
    "aggregated": "aggregated",
    "singlescale": "single_scale",
    "single_scale": "single_scale",
    "single-scale": "single_scale",
    "multiscale": "multi_scale",
    "multi_scale": "multi_scale",
    "multi-scale": "multi_scale",
}


def _from_dict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**data)


@dataclass
class BackboneConfig:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 8
    in_channels: int = 3
    img_size: int = 64
    gelu_approximate: bool = False
    preset: Optional[str] = None

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        preset = data.get("preset")
        if preset is not None:
            if preset not in BACKBONE_PRESETS:
                raise ConfigError(f"backbone: unknown preset {preset!r}; choose from {sorted(BACKBONE_PRESETS)}")
            data = {**BACKBONE_PRESETS[preset], **data}
        return _from_dict(cls, data, "backbone")

    @classmethod
    def preset_config(cls, name, **overrides):
        return cls.from_dict({"preset": name, **overrides})

    @property
    def grid(self):
        return self.img_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid * self.grid

    @property
    def mlp_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"backbone.depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"backbone.embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.patch_size < 1 or self.img_size % self.patch_size:
            raise ConfigError(f"backbone.img_size {self.img_size} not divisible by patch_size {self.patch_size}")


@dataclass
class SpmConfig:
    stem_channels: int = 32
    context_channels: int = 64
    num_blocks: int = 4

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "spm")

    def validate(self, img_size):
        if self.stem_channels < 1 or self.context_channels < 1:
            raise ConfigError("spm channel counts must be positive")
        kmax = int(math.floor(math.log2(img_size)))
        if not 1 <= self.num_blocks <= kmax:
            raise ConfigError(f"spm.num_blocks must lie in [1, {kmax}] for {img_size}px input, got {self.num_blocks}")


@dataclass
class AdapterConfig:
    rank: int = 16
    interaction_count: Optional[int] = None
    share_weights: bool = True
    query_rank: Optional[int] = None

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "adapter")

    def resolved_count(self, depth):
        return depth if self.interaction_count is None else self.interaction_count

    def validate(self, d, depth):
        if not 1 <= self.rank <= d:
            raise ConfigError(f"adapter.rank must lie in [1, {d}], got {self.rank}")
        if self.query_rank is not None and not 1 <= self.query_rank <= d:
            raise ConfigError(f"adapter.query_rank must lie in [1, {d}], got {self.query_rank}")
        n = self.resolved_count(depth)
        if not 1 <= n <= depth or depth % n:
            raise ConfigError(f"adapter.interaction_count {n} must divide backbone depth {depth}")


@dataclass
class Components:
    use_stem: bool = True
    use_blocks: bool = True
    use_aggregator: bool = True
    use_adapting: bool = True

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "components")

    def validate(self):
        if self.use_blocks and not self.use_stem:
            raise ConfigError("components: use_blocks requires use_stem")
        if self.use_aggregator and not self.use_blocks:
            raise ConfigError("components: use_aggregator requires use_blocks")
        if self.use_adapting and not (self.use_stem and self.use_blocks and self.use_aggregator):
            raise ConfigError("components: use_adapting requires stem, blocks and aggregator")

    @property
    def any_spm(self):
        return self.use_stem


# Table-VIII style wiring rows, in order of increasing trainable parameters.
COMPONENT_ROWS = (
    Components(False, False, False, False),
    Components(True, False, False, False),
    Components(True, True, False, False),
    Components(True, True, True, False),
    Components(True, True, True, True),
)


def normalize_strategy(name):
    key = str(name).strip().lower()
    if key not in _STRATEGY_ALIASES:
        raise ConfigError(f"unknown strategy {name!r}; choose from {list(STRATEGIES)}")
    return _STRATEGY_ALIASES[key]


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    spm: SpmConfig = field(default_factory=SpmConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    num_classes: int = 4
    strategy: str = "aggregated"
    components: Components = field(default_factory=Components)

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)

    @property
    def interaction_count(self):
        return self.adapter.resolved_count(self.backbone.depth)

    def validate(self):
        self.backbone.validate()
        self.components.validate()
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.components.use_stem:
            self.spm.validate(self.backbone.img_size)
        if self.components.use_adapting:
            self.adapter.validate(self.backbone.embed_dim, self.backbone.depth)
        elif self.strategy != "aggregated":
            raise ConfigError("strategy only applies when the adapting module is enabled")
        return self


@dataclass
class TrainConfig:
    max_iters: int = 2000
    warmup_iters: int = 50
    base_lr: float = 1e-4
    warmup_start_lr: float = 1e-6
    poly_power: float = 0.9
    eta_min: float = 0.0
    weight_decay: float = 0.05
    batch_size: int = 4
    val_interval: int = 200
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ignore_index: Optional[int] = None

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "training")

    def validate(self):
        if self.max_iters < 0:
            raise ConfigError("training.max_iters must be >= 0")
        if self.max_iters and not 0 <= self.warmup_iters < self.max_iters:
            raise ConfigError("training.warmup_iters must be smaller than max_iters")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0 or self.poly_power <= 0:
            raise ConfigError("training rates and poly_power must be positive")
        if self.eta_min < 0 or self.weight_decay < 0:
            raise ConfigError("training.eta_min and weight_decay must be >= 0")
        if self.batch_size < 1 or self.val_interval < 1:
            raise ConfigError("training.batch_size and val_interval must be >= 1")
        return self


@dataclass
class DataConfig:
    path: Optional[str] = None
    count: int = 250
    size: tuple = (64, 64)
    cover: object = "mixed"
    split: tuple = (8, 2, 0)
    seed: int = 42

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.split = tuple(self.split)

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "data")

    def validate(self):
        if len(self.size) != 2 or min(self.size) < 1:
            raise ConfigError(f"data.size must be [H, W], got {self.size}")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) <= 0:
            raise ConfigError(f"data.split must be three non-negative ratios, got {self.split}")
        return self


TOP_LEVEL_KEYS = ("backbone", "spm", "adapter", "num_classes", "strategy", "components", "training", "data")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = sorted(set(data) - set(TOP_LEVEL_KEYS))
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        model = ModelConfig(
            backbone=BackboneConfig.from_dict(data.get("backbone")),
            spm=SpmConfig.from_dict(data.get("spm")),
            adapter=AdapterConfig.from_dict(data.get("adapter")),
            num_classes=data.get("num_classes", 4),
            strategy=data.get("strategy", "aggregated"),
            components=Components.from_dict(data.get("components")),
        )
        return cls(model, TrainConfig.from_dict(data.get("training")), DataConfig.from_dict(data.get("data")))

    def to_dict(self):
        m = dataclasses.asdict(self.model)
        out = {k: m[k] for k in ("backbone", "spm", "adapter", "num_classes", "strategy", "components")}
        out["training"] = dataclasses.asdict(self.training)
        d = dataclasses.asdict(self.data)
        d["size"], d["split"] = list(d["size"]), list(d["split"])
        out["data"] = d
        return out

    def validate(self):
        self.model.validate()
        self.training.validate()
        self.data.validate()
        if self.data.path is None and tuple(self.data.size) != (self.model.backbone.img_size,) * 2:
            raise ConfigError(f"data.size {self.data.size} must equal backbone.img_size {self.model.backbone.img_size}")
        return self


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw).validate()


def large_shape_config(rank=16, interaction_count=24, context_channels=64, strategy="aggregated"):
    """Large-backbone configuration used for trainable-parameter accounting."""
    return ModelConfig(
        backbone=BackboneConfig.preset_config("large-shape"),
        spm=SpmConfig(context_channels=context_channels, num_blocks=4),
        adapter=AdapterConfig(rank=rank, interaction_count=interaction_count,
                              share_weights=False, query_rank=rank),
        num_classes=4,
        strategy=strategy,
    ).validate()
