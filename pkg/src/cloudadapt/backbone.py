"""Randomly initialized, permanently frozen vision-transformer encoder."""

import hashlib

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, ModuleList, Parameter


def backbone_param_shapes(cfg):
    """Name -> shape table of every backbone tensor (no allocation)."""
    d, p, c = cfg.embed_dim, cfg.patch_size, cfg.in_channels
    hidden = cfg.mlp_hidden
    shapes = {
        "patch_embed.weight": (c * p * p, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_tokens, d),
    }
    for j in range(cfg.depth):
        pre = f"layers.{j}."
        shapes.update({
            pre + "ln1.weight": (d,),
            pre + "ln1.bias": (d,),
            pre + "attn.qkv.weight": (d, 3 * d),
            pre + "attn.qkv.bias": (3 * d,),
            pre + "attn.proj.weight": (d, d),
            pre + "attn.proj.bias": (d,),
            pre + "ln2.weight": (d,),
            pre + "ln2.bias": (d,),
            pre + "mlp.fc1.weight": (d, hidden),
            pre + "mlp.fc1.bias": (hidden,),
            pre + "mlp.fc2.weight": (hidden, d),
            pre + "mlp.fc2.bias": (d,),
        })
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


class Attention(Module):
    def __init__(self, rng, d, heads):
        super().__init__()
        self.heads = heads
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d)

    def forward(self, x, return_attention=False):
        n, t, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(n, t, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // h))
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        out = self.proj(out)
        return (out, attn) if return_attention else out


class Mlp(Module):
    def __init__(self, rng, d, hidden, approximate):
        super().__init__()
        self.approximate = approximate
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x), self.approximate))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng, cfg):
        super().__init__()
        d = cfg.embed_dim
        self.ln1 = LayerNorm(d)
        self.attn = Attention(rng, d, cfg.heads)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(rng, d, cfg.mlp_hidden, cfg.gelu_approximate)

    def forward(self, x, return_attention=False):
        if return_attention:
            a, attn = self.attn(self.ln1(x), return_attention=True)
        else:
            a, attn = self.attn(self.ln1(x)), None
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return (x, attn) if return_attention else x


class FrozenBackbone(Module):
    """ViT encoder without a class token; all tokens are spatial.

    Weights are drawn from ``np.random.default_rng(seed)`` (kaiming normal for
    linear weights, zero biases, N(0, 0.02) positional embedding) and frozen.
    """

    def __init__(self, cfg, seed=42):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = Linear(rng, cfg.in_channels * p * p, d)
        self.pos_embed = Parameter((rng.standard_normal((cfg.num_tokens, d)) * 0.02).astype(np.float32))
        self.layers = ModuleList(Block(rng, cfg) for _ in range(cfg.depth))
        self.norm = LayerNorm(d)
        self.freeze_all()

    def freeze_all(self):
        self.freeze()

    @property
    def depth(self):
        return self.cfg.depth

    def patch_embed_tokens(self, x):
        """``x[N, C, H, W]`` -> tokens ``[N, (H/p)(W/p), d]`` in row-major patch order."""
        n, c, h, w = x.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        if gh * gw != self.cfg.num_tokens or c != self.cfg.in_channels:
            raise DimensionError(
                f"backbone expects {self.cfg.in_channels}x{self.cfg.img_size}x{self.cfg.img_size} input, got {c}x{h}x{w}")
        patches = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)
        return self.patch_embed(patches) + self.pos_embed

    def layer_forward(self, tokens, j, return_attention=False):
        if not 0 <= j < self.cfg.depth:
            raise ContractError(f"layer index {j} out of range for depth {self.cfg.depth}")
        return self.layers[j](tokens, return_attention=return_attention)

    def forward_with_hooks(self, x, hook=None, layers=None):
        """Run all layers; ``hook(j, F_j)`` may replace layer ``j``'s output.

        ``layers`` restricts which indices the hook sees (all when None). A hook
        returning None passes the features through. Returns the normalized final
        tokens and the list of pre-hook layer outputs.
        """
        tokens = self.patch_embed_tokens(x)
        hooked = None if layers is None else set(layers)
        features = []
        for j in range(self.cfg.depth):
            feat = self.layers[j](tokens)
            features.append(feat)
            tokens = feat
            if hook is not None and (hooked is None or j in hooked):
                out = hook(j, feat)
                if out is not None:
                    if out.shape != feat.shape:
                        raise DimensionError(f"hook at layer {j} returned {out.shape}, expected {feat.shape}")
                    tokens = out
        return self.norm(tokens), features

    def forward(self, x):
        return self.forward_with_hooks(x)[0]

    def checksum(self):
        return params_checksum(self.named_parameters())


def params_checksum(named_params):
    """SHA-256 over names, shapes and little-endian f32 bytes, in sorted name order."""
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.asarray(p.shape, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()
