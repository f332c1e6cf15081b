"""Differentiable-op catalogue shared by the unit tests and the acceptance run.

Each case builds its inputs from a seeded generator and wraps the op output in
a centered random projection, so every input of every op is checked through a
scalar that stays near zero.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cloudadapt import tensor as T
from cloudadapt.adapter import cross_attention, low_rank_map
from cloudadapt.training import cross_entropy_loss


@dataclass
class OpCase:
    name: str
    shapes: Sequence[tuple]
    fn: Callable
    positive: Sequence[bool] = ()
    kwargs: dict = None

    def inputs(self, rng):
        out = []
        for i, shape in enumerate(self.shapes):
            a = rng.standard_normal(shape)
            if i < len(self.positive) and self.positive[i]:
                a = np.abs(a) + 0.5
            out.append(a)
        return out


_TARGET = np.array([[[0, 1], [1, 0]], [[1, 1], [0, 0]]])

OP_CASES = [
    OpCase("add", [(3, 4), (4,)], lambda a, b: a + b),
    OpCase("sub", [(2, 3), (2, 3)], lambda a, b: a - b),
    OpCase("mul", [(3, 1), (1, 4)], lambda a, b: a * b),
    OpCase("div", [(2, 3), (2, 3)], lambda a, b: a / b, positive=(False, True)),
    OpCase("neg", [(5,)], lambda a: -a),
    OpCase("power", [(2, 3)], lambda a: a ** 3),
    OpCase("power_frac", [(2, 3)], lambda a: a ** 0.5, positive=(True,)),
    OpCase("exp", [(2, 3)], T.exp),
    OpCase("log", [(2, 3)], T.log, positive=(True,)),
    OpCase("matmul", [(3, 4), (4, 2)], lambda a, b: a @ b),
    OpCase("matmul_batched", [(2, 3, 4), (4, 5)], lambda a, b: a @ b),
    OpCase("reshape", [(2, 6)], lambda a: a.reshape(3, 4)),
    OpCase("transpose", [(2, 3, 4)], lambda a: a.transpose(2, 0, 1)),
    OpCase("getitem", [(4, 5)], lambda a: a[1:3, ::2]),
    OpCase("sum_axis", [(3, 4)], lambda a: a.sum(axis=1, keepdims=True)),
    OpCase("mean", [(3, 4)], lambda a: a.mean(axis=0)),
    OpCase("concat", [(2, 3), (2, 2)], lambda a, b: T.concat([a, b], axis=1)),
    OpCase("softmax", [(3, 5)], lambda a: T.softmax(a, axis=-1)),
    OpCase("log_softmax", [(3, 5)], lambda a: T.log_softmax(a, axis=0)),
    OpCase("gelu", [(3, 4)], T.gelu),
    OpCase("gelu_tanh", [(3, 4)], lambda a: T.gelu(a, approximate=True)),
    OpCase("standardize", [(3, 6)], T.standardize),
    OpCase("layer_norm", [(2, 3, 5), (5,), (5,)], T.layer_norm),
    OpCase("channel_norm", [(2, 3, 2, 2), (3,), (3,)], T.channel_norm),
    OpCase("conv2d", [(1, 2, 5, 5), (3, 2, 3, 3), (3,)],
           lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)),
    OpCase("conv2d_stride_groups", [(2, 4, 5, 6), (4, 1, 3, 3), (4,)],
           lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1, groups=4)),
    OpCase("conv2d_pointwise", [(1, 3, 4, 4), (2, 3, 1, 1)], lambda x, w: T.conv2d(x, w)),
    OpCase("adaptive_avg_pool2d", [(1, 2, 5, 6)], lambda x: T.adaptive_avg_pool2d(x, 2, 4)),
    OpCase("upsample_bilinear", [(1, 2, 3, 2)], lambda x: T.upsample_bilinear(x, 5, 6)),
    OpCase("cross_entropy", [(2, 2, 2, 2)], lambda x: cross_entropy_loss(x, _TARGET)),
    OpCase("cross_attention", [(2, 3, 4), (2, 5, 4), (2, 5, 4)], cross_attention),
    OpCase("low_rank_map", [(2, 3, 4), (4, 2), (2, 4)], low_rank_map),
]


def check_op(case, seed=0, h=1e-3, shadow=True):
    """Worst relative error over every input of ``case`` (all coordinates).

    With ``shadow`` the f32 analytic gradient is compared with central
    differences evaluated in float64; otherwise both sides run in float32.
    """
    arrays = case.inputs(np.random.default_rng([seed, 101]))
    worst = 0.0
    for i in range(len(arrays)):
        leaves = [T.Tensor(a.astype(np.float32), requires_grad=(j == i)) for j, a in enumerate(arrays)]

        def f32_fn(v, leaves=leaves, i=i):
            return case.fn(*[v if j == i else t for j, t in enumerate(leaves)])

        probe = T.centered_probe(f32_fn, leaves[i], seed)
        reference = None
        if shadow:
            with T.default_dtype(np.float64):
                leaves64 = [T.Tensor(a, requires_grad=(j == i)) for j, a in enumerate(arrays)]

                def f64_fn(v, leaves64=leaves64, i=i):
                    return case.fn(*[v if j == i else t for j, t in enumerate(leaves64)])

                reference = (T.centered_probe(f64_fn, leaves64[i], seed), leaves64[i])
        if reference is None:
            err = T.grad_check(probe, leaves[i], h=h)
        else:
            with T.default_dtype(np.float64):
                err = T.grad_check(probe, leaves[i], h=h, reference=reference)
        worst = max(worst, err)
    return worst


def check_op_f64(case, seed=0, h=1e-6):
    """Worst relative error with both the analytic and the numeric side in float64."""
    arrays = case.inputs(np.random.default_rng([seed, 101]))
    worst = 0.0
    with T.default_dtype(np.float64):
        for i in range(len(arrays)):
            leaves = [T.Tensor(a, requires_grad=(j == i)) for j, a in enumerate(arrays)]

            def fn(v, leaves=leaves, i=i):
                return case.fn(*[v if j == i else t for j, t in enumerate(leaves)])

            worst = max(worst, T.grad_check(T.centered_probe(fn, leaves[i], seed), leaves[i], h=h))
    return worst


TOY_E2E = {
    "backbone": {"depth": 2, "embed_dim": 8, "heads": 2, "patch_size": 4, "img_size": 16},
    "spm": {"stem_channels": 4, "context_channels": 8, "num_blocks": 2},
    "adapter": {"rank": 2},
}


def e2e_model(seed):
    """Toy model with a random (nonzero) adapter output map and a 16x16 input."""
    import copy

    from cloudadapt.config import ExperimentConfig
    from cloudadapt.model import CloudAdapterNet

    cfg = ExperimentConfig.from_dict(TOY_E2E).model.validate()
    rng = np.random.default_rng([seed, 202])
    model = CloudAdapterNet(cfg, seed)
    # W2 starts at zero, which would leave the adapter and spatial branch without gradient
    for name, p in model.trainable_named():
        if name.endswith("w2"):
            p.data = (rng.standard_normal(p.shape) * 0.5).astype(np.float32)
    x = rng.random((1, 3, 16, 16))
    return model, copy.deepcopy(model).to_dtype(np.float64), x


def check_e2e(seed, h=1e-3, samples=3):
    """Per-leaf worst relative error for the toy model (every trainable tensor plus the input).

    f32 analytic gradients against float64 central differences, ``samples``
    random coordinates per leaf.
    """
    model, model64, xs = e2e_model(seed)
    x = T.Tensor(xs.astype(np.float32), requires_grad=True)
    with T.default_dtype(np.float64):
        x64 = T.Tensor(xs, requires_grad=True)
    leaves64 = dict(model64.trainable_named() + [("input", x64)])
    out = {}
    for name, p in model.trainable_named() + [("input", x)]:
        p64 = leaves64[name]
        probe = T.centered_probe(lambda v: model.forward(x), p, seed)
        with T.default_dtype(np.float64):
            probe64 = T.centered_probe(lambda v: model64.forward(x64), p64, seed)
            out[name] = T.grad_check(probe, p, h=h, samples=samples, seed=seed, reference=(probe64, p64))
    return out
