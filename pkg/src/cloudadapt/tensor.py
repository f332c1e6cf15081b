"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on tensors that need gradients records a node carrying a
monotonically increasing sequence number. ``Tensor.backward`` collects the
nodes reachable from the loss and replays them in decreasing sequence order,
which is reverse execution order. The graph is consumed by the pass.
"""

import itertools
import struct
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DataError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "matmul",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "concat",
    "softmax",
    "log_softmax",
    "gelu",
    "standardize",
    "layer_norm",
    "channel_norm",
    "conv2d",
    "adaptive_avg_pool2d",
    "upsample_bilinear",
    "grad_check",
    "save_cst",
    "load_cst",
]

_state = threading.local()
_seq = itertools.count()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents, backward):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t`` needing it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        seen = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            if t._node is not None:
                stack.extend(p for p in t._node.parents if p.requires_grad)
        interior = sorted((t for t in seen.values() if t._node is not None),
                          key=lambda t: t._node.seq, reverse=True)
        grads = {id(self): np.ones_like(self.data)}
        for t in interior:
            g = grads.pop(id(t), None)
            node = t._node
            t._node = None
            if g is None:
                continue
            t.grad = g
            for p, pg in zip(node.parents, node.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        for tid, g in grads.items():
            leaf = seen[tid]
            g = np.array(g, dtype=leaf.data.dtype, copy=True).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def custom_op(data, parents, backward):
    """Wrap ``data`` as the output of an op whose vector-Jacobian product is ``backward``.

    ``backward(g)`` must return one gradient (or None) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out._node = _Node(parents, backward) if out.requires_grad else None
    return out


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return custom_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return custom_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return custom_op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return custom_op(out, (a, b), bw)


def neg(a):
    return custom_op(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise ``a ** p`` for a constant exponent."""
    p = float(p)
    return custom_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a):
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def matmul(a, b):
    """Batched matrix product over the last two axes with broadcast batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data @ b.data, (a, b), bw)


def reshape(a, shape):
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _getitem(a, idx):
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return custom_op(a.data[idx], (a,), bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return custom_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def concat(tensors, axis=0):
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(out, tensors, bw)


def _check_axis(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")


def softmax(a, axis=-1):
    """Softmax along ``axis``, shifted by the max for stability."""
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom_op(s, (a,), bw)


def log_softmax(a, axis=-1):
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return custom_op(ls, (a,), bw)


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gelu(a, approximate=False):
    """GELU, exact ``x * Phi(x)`` unless ``approximate`` selects the tanh form."""
    x = a.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)
        dout = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    else:
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        out = x * cdf
        dout = cdf + x * pdf
    out = out.astype(x.dtype, copy=False)
    dout = dout.astype(x.dtype, copy=False)
    return custom_op(out, (a,), lambda g: (g * dout,))


def standardize(a, eps=1e-6):
    """Zero mean, unit variance along the last axis (biased variance)."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def bw(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = g.dtype.type(1.0 / n) * rstd * (n * g - gs - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    return custom_op(xhat.astype(x.dtype, copy=False), (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis of ``x`` then apply the per-feature affine map."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dim of {x.shape}")
    return standardize(x, eps) * gamma + beta


def channel_norm(x, gamma, beta, eps=1e-5):
    """Single-group normalization of ``x[N, C, H, W]``: statistics over (C, H, W) per sample,
    then a per-channel affine map."""
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"channel_norm: gamma {gamma.shape} / beta {beta.shape} vs channels {c}")
    y = reshape(standardize(reshape(x, (n, c * h * w)), eps), (n, c, h, w))
    return y * reshape(gamma, (c, 1, 1)) + reshape(beta, (c, 1, 1))


def conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation of ``x[N, Cin, H, W]`` with ``w[Cout, Cin/groups, kh, kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise DimensionError(f"conv2d: channels in={cin} out={cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise DimensionError(f"conv2d: weight {w.shape} expects {cg * groups} input channels, input has {cin}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    ho = kernels.conv_out_size(h, kh, stride, padding)
    wo = kernels.conv_out_size(wd, kw, stride, padding)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    cols = x.data if pointwise else kernels.im2col(x.data, kh, kw, stride, padding)
    k = cg * kh * kw
    cols_g = cols.reshape(n, groups, k, ho * wo)
    w_g = w.data.reshape(groups, cout // groups, k)
    out = np.matmul(w_g, cols_g).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(cout, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g_g = g.reshape(n, groups, cout // groups, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g_g, np.swapaxes(cols_g, -1, -2)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(w_g, -1, -2), g_g).reshape(n, cin * kh * kw, ho, wo)
            gx = gcols.reshape(x.shape) if pointwise else kernels.col2im(gcols, x.shape, kh, kw, stride, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return custom_op(out, parents, bw)


def _pool_matrix(size, out, dtype):
    m = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m.astype(dtype)


def _bilinear_matrix(size, out, dtype):
    m = np.zeros((out, size), dtype=np.float64)
    scale = size / out
    for i in range(out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def _separable(x, mh, mw):
    """Apply ``mh @ x @ mw.T`` over the trailing two axes of ``x``."""
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return custom_op(out, (x,), bw)


def adaptive_avg_pool2d(x, out_h, out_w):
    """Average ``x[N, C, H, W]`` over bins ``[floor(i*H/out), ceil((i+1)*H/out))`` per axis."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d expects N,C,H,W input, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise DimensionError(f"adaptive_avg_pool2d: cannot pool {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    return _separable(x, _pool_matrix(h, out_h, x.dtype), _pool_matrix(w, out_w, x.dtype))


def upsample_bilinear(x, out_h, out_w):
    """Bilinear resize of ``x[N, C, H, W]`` with half-pixel centers (no corner alignment)."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects N,C,H,W input, got {x.shape}")
    h, w = x.shape[2:]
    if (out_h, out_w) == (h, w):
        return x
    return _separable(x, _bilinear_matrix(h, out_h, x.dtype), _bilinear_matrix(w, out_w, x.dtype))


def grad_check(f, x, h=1e-3, samples=None, seed=0, reference=None):
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    ``f`` maps the leaf tensor ``x`` to a scalar tensor. Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. ``samples`` limits the
    check to that many randomly chosen coordinates.

    ``reference=(f_ref, x_ref)`` evaluates the finite differences on a shadow
    copy instead, typically the same function and values in float64, so an f32
    gradient is judged against an oracle free of f32 rounding noise.
    """
    if not x.requires_grad:
        raise ContractError("grad_check needs x with requires_grad=True")
    f_num, x_num = (f, x) if reference is None else reference
    if x_num.shape != x.shape:
        raise DimensionError(f"grad_check: reference shape {x_num.shape} differs from {x.shape}")
    x.grad = None
    loss = f(x)
    if loss.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {loss.shape}")
    loss.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.astype(np.float64).reshape(-1)
    flat = x_num.data.reshape(-1)
    if samples is None or samples >= flat.size:
        idx = np.arange(flat.size)
    else:
        idx = np.random.default_rng(seed).choice(flat.size, size=samples, replace=False)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = flat[i]
            fp = float(f_num(x_num).data)
            flat[i] = orig - h
            down = flat[i]
            fm = float(f_num(x_num).data)
            flat[i] = orig
            numeric = (fp - fm) / (float(up) - float(down))
            a = float(analytic[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def centered_probe(fn, x, seed=0):
    """Scalar test function ``v -> sum((fn(v) - fn(x)) * R)`` for :func:`grad_check`.

    Its gradient equals that of ``sum(fn(v) * R)``, but its value stays near
    zero around ``x``, so finite differences are not swamped by the rounding
    of a large f32 scalar.
    """
    with no_grad():
        base = fn(x).data.copy()
    r = np.random.default_rng(seed).standard_normal(base.shape).astype(base.dtype)
    base_t, r_t = Tensor(base), Tensor(r)
    return lambda v: ((fn(v) - base_t) * r_t).sum()


_CST_MAGIC = b"CST1"


def save_cst(path, array):
    """Write ``array`` in the ``.cst`` container: magic, u8 rank, u32 dims, f32 payload (all LE)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim > 255:
        raise DimensionError("cst rank must fit in a byte")
    with open(path, "wb") as fh:
        fh.write(_CST_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_cst(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CST_MAGIC:
        raise DataError(f"{path}: not a CST1 file")
    if len(raw) < 5:
        raise DataError(f"{path}: truncated header")
    rank = raw[4]
    head = 5 + 4 * rank
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", raw[5:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != head + 4 * count:
        raise DataError(f"{path}: payload is {len(raw) - head} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(dims).astype(np.float32)
