"""Pure-numpy convolution kernels (fallback backend).

Same call signatures as the compiled extension. All arrays are C-contiguous
float64; shape validation happens in the autodiff layer, not here.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, padding, dilation):
    # (N, C, Ho, Wo, kh, kw) view of the padded input
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def im2col(x, kh, kw, stride, padding, dilation):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c = x.shape[:2]
    win = _windows(x, kh, kw, stride, padding, dilation)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, stride, padding, dilation, ho, wo):
    """Scatter-add transpose of im2col back to an (N, C, H, W) gradient."""
    grad = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        ri = slice(i * dilation, i * dilation + (ho - 1) * stride + 1, stride)
        for j in range(kw):
            rj = slice(j * dilation, j * dilation + (wo - 1) * stride + 1, stride)
            grad[:, :, ri, rj] += cols6[:, :, i, j]
    if padding:
        grad = grad[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(grad)


def depthwise_forward(x, k, stride, padding):
    """Per-channel conv: x (N, C, H, W), k (C, kh, kw) -> (N, C, Ho, Wo)."""
    win = _windows(x, k.shape[1], k.shape[2], stride, padding, 1)
    return np.einsum("nchwij,cij->nchw", win, k, optimize=True)


def depthwise_backward(x, k, grad_out, stride, padding):
    """Returns (grad_x, grad_k) for depthwise_forward."""
    kh, kw = k.shape[1], k.shape[2]
    win = _windows(x, kh, kw, stride, padding, 1)
    grad_k = np.einsum("nchwij,nchw->cij", win, grad_out, optimize=True)

    n, c, h, w = x.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    grad = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        ri = slice(i, i + (ho - 1) * stride + 1, stride)
        for j in range(kw):
            rj = slice(j, j + (wo - 1) * stride + 1, stride)
            grad[:, :, ri, rj] += grad_out * k[None, :, i, j, None, None]
    if padding:
        grad = grad[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(grad), grad_k
