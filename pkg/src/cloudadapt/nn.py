"""Minimal module system: parameter registration, layers, and initializers."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module."""

    __slots__ = ()

    def __init__(self, data, trainable=True):
        super().__init__(np.array(data, copy=True), requires_grad=trainable)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def param_shapes(self):
        return {n: tuple(p.shape) for n, p in self.named_parameters()}

    def num_params(self, trainable=None):
        return sum(p.size for p in self.parameters() if trainable is None or p.requires_grad == trainable)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def kaiming_normal(rng, shape, fan_in):
    """He-normal init: N(0, 2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, rng, d_in, d_out, bias=True, trainable=True):
        super().__init__()
        self.weight = Parameter(kaiming_normal(rng, (d_in, d_out), d_in), trainable)
        self.bias = Parameter(np.zeros(d_out, np.float32), trainable) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6, trainable=True):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, np.float32), trainable)
        self.bias = Parameter(np.zeros(dim, np.float32), trainable)

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class ChannelNorm(Module):
    """One-group normalization with per-channel gain and bias; batch-independent."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))

    def forward(self, x):
        return T.channel_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class SeparableConv2d(Module):
    """Depthwise ``kernel x kernel`` convolution followed by a pointwise 1x1 projection."""

    def __init__(self, rng, c_in, c_out, kernel, stride=1):
        super().__init__()
        self.depthwise = Conv2d(rng, c_in, c_in, kernel, stride, kernel // 2, groups=c_in)
        self.pointwise = Conv2d(rng, c_in, c_out, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


def separable_conv_shapes(c_in, c_out, kernel, prefix=""):
    return {
        f"{prefix}depthwise.weight": (c_in, 1, kernel, kernel),
        f"{prefix}depthwise.bias": (c_in,),
        f"{prefix}pointwise.weight": (c_out, c_in, 1, 1),
        f"{prefix}pointwise.bias": (c_out,),
    }
