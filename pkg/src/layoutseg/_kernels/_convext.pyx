# Compiled convolution kernels. Signatures mirror conv_numpy; the matmul
# half of conv stays in BLAS, these cover the gather/scatter hot loops.
import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int padding,
           int dilation):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c * kh * kw, ho * wo))
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, ih, iw, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            ih = oh * stride - padding + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride - padding + j * dilation
                                if 0 <= iw < w:
                                    cols[b, row, oh * wo + ow] = x[b, ch, ih, iw]
    return out


def col2im(double[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int kh, int kw, int stride, int padding, int dilation,
           Py_ssize_t ho, Py_ssize_t wo):
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] grad = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, ih, iw, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            ih = oh * stride - padding + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride - padding + j * dilation
                                if 0 <= iw < w:
                                    grad[b, ch, ih, iw] += cols[b, row, oh * wo + ow]
    return out


def depthwise_forward(double[:, :, :, ::1] x, double[:, :, ::1] k, int stride,
                      int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int kh = <int>k.shape[1], kw = <int>k.shape[2]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c, ho, wo))
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, ih, iw
    cdef double acc
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for i in range(kh):
                            ih = oh * stride - padding + i
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * stride - padding + j
                                if 0 <= iw < w:
                                    acc += x[b, ch, ih, iw] * k[ch, i, j]
                        y[b, ch, oh, ow] = acc
    return out


def depthwise_backward(double[:, :, :, ::1] x, double[:, :, ::1] k,
                       double[:, :, :, ::1] grad_out, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int kh = <int>k.shape[1], kw = <int>k.shape[2]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    gk_arr = np.zeros((c, kh, kw))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, ch, i, j, oh, ow, ih, iw
    cdef double g
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        g = grad_out[b, ch, oh, ow]
                        for i in range(kh):
                            ih = oh * stride - padding + i
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * stride - padding + j
                                if 0 <= iw < w:
                                    gx[b, ch, ih, iw] += g * k[ch, i, j]
                                    gk[ch, i, j] += g * x[b, ch, ih, iw]
    return gx_arr, gk_arr
