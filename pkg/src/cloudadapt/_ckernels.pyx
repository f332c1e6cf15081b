# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for the convolution path.

Every output pixel of col2im receives its contributions in (ki, kj) order,
the same order as the numpy fallback, so both backends agree bitwise.
"""

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride) noexcept nogil:
    # smallest o >= 0 with o*stride + k - pad >= 0
    cdef Py_ssize_t need = pad - k
    if need <= 0:
        return 0
    return (need + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride,
                                  Py_ssize_t size, Py_ssize_t n_out) noexcept nogil:
    # one past the largest o < n_out with o*stride + k - pad < size
    cdef Py_ssize_t lim = size - 1 + pad - k
    if lim < 0:
        return 0
    lim = lim // stride + 1
    return lim if lim < n_out else n_out


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
           real[:, :, :, ::1] out):
    """Fill ``out[n, (c, ki, kj), oh, ow]`` with the zero-padded window values."""
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, ow0, ow1, oh0, oh1, base
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef const real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                src = &x[n, c, 0, 0]
                for ki in range(kh):
                    oh0 = _first_valid(ki, pad, stride)
                    oh1 = _end_valid(ki, pad, stride, H, Ho)
                    for kj in range(kw):
                        dst = &out[n, (c * kh + ki) * kw + kj, 0, 0]
                        ow0 = _first_valid(kj, pad, stride)
                        ow1 = _end_valid(kj, pad, stride, W, Wo)
                        for oh in range(Ho):
                            if oh < oh0 or oh >= oh1:
                                for ow in range(Wo):
                                    dst[oh * Wo + ow] = 0
                                continue
                            ih = oh * stride + ki - pad
                            for ow in range(ow0):
                                dst[oh * Wo + ow] = 0
                            base = ih * W + kj - pad
                            if stride == 1:
                                for ow in range(ow0, ow1):
                                    dst[oh * Wo + ow] = src[base + ow]
                            else:
                                for ow in range(ow0, ow1):
                                    dst[oh * Wo + ow] = src[base + ow * stride]
                            for ow in range(ow1, Wo):
                                dst[oh * Wo + ow] = 0


def col2im(const real[:, :, :, ::1] cols, int kh, int kw, int stride, int pad,
           real[:, :, :, ::1] out):
    """Scatter-add column gradients back onto the (unpadded, zeroed) image ``out``."""
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, ow0, ow1, oh0, oh1, base
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t Ho = cols.shape[2], Wo = cols.shape[3]
    cdef const real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                dst = &out[n, c, 0, 0]
                for ki in range(kh):
                    oh0 = _first_valid(ki, pad, stride)
                    oh1 = _end_valid(ki, pad, stride, H, Ho)
                    for kj in range(kw):
                        src = &cols[n, (c * kh + ki) * kw + kj, 0, 0]
                        ow0 = _first_valid(kj, pad, stride)
                        ow1 = _end_valid(kj, pad, stride, W, Wo)
                        for oh in range(oh0, oh1):
                            ih = oh * stride + ki - pad
                            base = ih * W + kj - pad
                            if stride == 1:
                                for ow in range(ow0, ow1):
                                    dst[base + ow] += src[oh * Wo + ow]
                            else:
                                for ow in range(ow0, ow1):
                                    dst[base + ow * stride] += src[oh * Wo + ow]
