"""Cross-attention adapting module with a low-rank output map.

Backbone tokens query the flattened spatial context. The attention output
passes through the bias-free map ``z @ W1 @ W2``, which has rank at most r,
and is added back onto the tokens.

The key/value projections read only the context, and the context is the same
at every interaction point. So ``K`` and ``V`` are projected once per forward
pass by a single :class:`ContextProjection`. Query projections and low-rank
maps belong to interaction units. With ``share_weights`` there is one unit
reused at every point; otherwise each point gets its own unit.
"""

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Module, ModuleList, Parameter, kaiming_normal


def adapter_param_shapes(d, context_channels, rank, n_points, share_weights=True, query_rank=None):
    shapes = {"context.key": (context_channels, d), "context.value": (context_channels, d)}
    for u in range(1 if share_weights else n_points):
        pre = f"units.{u}."
        if query_rank is None:
            shapes[pre + "query"] = (d, d)
        else:
            shapes[pre + "query_down"] = (d, query_rank)
            shapes[pre + "query_up"] = (query_rank, d)
        shapes[pre + "w1"] = (d, rank)
        shapes[pre + "w2"] = (rank, d)
    return shapes


def flatten_context(f):
    """``[N, C, H, W]`` map -> ``[N, H*W, C]`` context tokens (tokens pass through)."""
    if f.ndim == 3:
        return f
    if f.ndim != 4:
        raise DimensionError(f"context must be N,C,H,W or N,M,C, got {f.shape}")
    n, c, h, w = f.shape
    return f.reshape(n, c, h * w).transpose(0, 2, 1)


def cross_attention(q, k, v, return_scores=False):
    """``softmax(Q K^T / sqrt(d)) V`` with a single head; d is the query width."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"cross_attention: Q {q.shape}, K {k.shape}, V {v.shape} are inconsistent")
    d = q.shape[-1]
    s = T.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d)), axis=-1)
    o = s @ v
    return (o, s) if return_scores else o


def low_rank_map(z, w1, w2):
    """``z @ W1 @ W2``: no bias, no activation."""
    if z.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != z.shape[-1]:
        raise DimensionError(f"low_rank_map: z {z.shape}, W1 {w1.shape}, W2 {w2.shape}")
    return (z @ w1) @ w2


class ContextProjection(Module):
    def __init__(self, rng, context_channels, d):
        super().__init__()
        self.key = Parameter(kaiming_normal(rng, (context_channels, d), context_channels))
        self.value = Parameter(kaiming_normal(rng, (context_channels, d), context_channels))

    def forward(self, context):
        tokens = flatten_context(context)
        if tokens.shape[-1] != self.key.shape[0]:
            raise DimensionError(f"context has {tokens.shape[-1]} channels, projection expects {self.key.shape[0]}")
        return tokens @ self.key, tokens @ self.value


class InteractionUnit(Module):
    def __init__(self, rng, d, rank, query_rank=None):
        super().__init__()
        if query_rank is None:
            self.query = Parameter(kaiming_normal(rng, (d, d), d))
        else:
            self.query_down = Parameter(kaiming_normal(rng, (d, query_rank), d))
            self.query_up = Parameter(kaiming_normal(rng, (query_rank, d), query_rank))
        self.w1 = Parameter(kaiming_normal(rng, (d, rank), d))
        # zero output map: the unit starts as the identity on backbone tokens
        self.w2 = Parameter(np.zeros((rank, d), np.float32))

    def project_query(self, tokens):
        if tokens.shape[-1] != self.w1.shape[0]:
            raise DimensionError(f"tokens have width {tokens.shape[-1]}, adapter expects {self.w1.shape[0]}")
        if "query" in self._params:
            return tokens @ self.query
        return (tokens @ self.query_down) @ self.query_up

    def forward(self, tokens, k, v):
        o = cross_attention(self.project_query(tokens), k, v)
        return low_rank_map(o, self.w1, self.w2) + tokens


class AdaptingModule(Module):
    def __init__(self, d, context_channels, rank=16, n_points=1, share_weights=True, query_rank=None, seed=42):
        super().__init__()
        rng = np.random.default_rng([seed, 2])
        self.d = d
        self.n_points = n_points
        self.share_weights = share_weights
        self.context = ContextProjection(rng, context_channels, d)
        count = 1 if share_weights else n_points
        self.units = ModuleList(InteractionUnit(rng, d, rank, query_rank) for _ in range(count))

    def unit(self, point):
        if not 0 <= point < self.n_points:
            raise IndexError(f"interaction point {point} out of range for {self.n_points} points")
        return self.units[0 if self.share_weights else point]

    def project_qkv(self, tokens, context, point=0):
        k, v = self.context(context)
        return self.unit(point).project_query(tokens), k, v

    def adapt(self, tokens, context, point=0):
        """``F_att = M(softmax(Q K^T / sqrt(d)) V) + F`` for one interaction point."""
        k, v = self.context(context)
        return self.unit(point)(tokens, k, v)

    def adapt_projected(self, tokens, k, v, point=0):
        return self.unit(point)(tokens, k, v)
