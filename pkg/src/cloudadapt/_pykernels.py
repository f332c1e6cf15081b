"""Pure-numpy fallback for the convolution kernels in ``_ckernels.pyx``."""

import numpy as np


def im2col(x, kh, kw, stride, pad, out):
    n, c, h, w = x.shape
    ho, wo = out.shape[2], out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = out.reshape(n, c, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            view[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]


def col2im(cols, kh, kw, stride, pad, out):
    n, c, h, w = out.shape
    ho, wo = cols.shape[2], cols.shape[3]
    view = cols.reshape(n, c, kh, kw, ho, wo)
    if pad:
        buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=out.dtype)
    else:
        buf = out
    for ki in range(kh):
        for kj in range(kw):
            buf[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += view[:, :, ki, kj]
    if pad:
        out += buf[:, :, pad:pad + h, pad:pad + w]
