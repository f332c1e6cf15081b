"""Convolution kernels with a compiled core and a numpy fallback.

The Cython extension is used when it was built; set
``CLOUDADAPT_KERNELS=numpy`` to force the fallback. Both backends produce
bitwise-identical results.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"numpy": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_requested = os.environ.get("CLOUDADAPT_KERNELS", "").strip().lower()
if _requested and _requested not in ("numpy", "cython"):
    raise ImportError(f"CLOUDADAPT_KERNELS must be 'numpy' or 'cython', got {_requested!r}")
if _requested == "cython" and _ckernels is None:
    raise ImportError("CLOUDADAPT_KERNELS=cython but the compiled extension is not built")

BACKEND = _requested or ("cython" if _ckernels is not None else "numpy")
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active kernel backend; returns the previous one."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    prev = BACKEND
    BACKEND, _impl = name, _BACKENDS[name]
    return prev


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N, C, H, W]`` into ``cols[N, C*kh*kw, Ho, Wo]``."""
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    out = np.empty((n, c * kh * kw, ho, wo), dtype=x.dtype)
    _impl.im2col(x, kh, kw, stride, pad, out)
    return out


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: sum window columns back into an image of ``shape``."""
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    _impl.col2im(cols, kh, kw, stride, pad, out)
    return out
