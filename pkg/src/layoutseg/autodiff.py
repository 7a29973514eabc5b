"""Reverse-mode autodiff over f64 numpy arrays.

Only the primitives the segmentation network needs. Operations executed
while a Tape is active record a backward rule; Tape.backward replays the
rules in reverse execution order. Gradients accumulate into Parameter.grad
buffers (persistent) and into plain Tensor.grad lazily.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K


class Tensor:
    """N-d array of float64 plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """Learnable (or frozen) tensor; gradient buffer always allocated."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True):
        super().__init__(data)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    _active = None

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def record(self, out, backward_fn):
        self._nodes.append((out, backward_fn))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        # clear intermediate grads so repeated calls accumulate only into
        # Parameters (documented accumulation semantics)
        for out, _ in self._nodes:
            if not isinstance(out, Parameter):
                out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def backward(tape, loss):
    tape.backward(loss)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.reshape(t.data.shape)


def _record(out, fn):
    tape = Tape._active
    if tape is not None:
        tape.record(out, fn)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    n, cin, h, wd = x.data.shape
    cout, cin_k, kh, kw = w.data.shape
    if cin != cin_k:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size {ho}x{wo} is not positive")
    cols = K.im2col(x.data, kh, kw, stride, padding, dilation)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_mat = np.matmul(w2, cols)  # (N, cout, Ho*Wo)
    out_arr = out_mat.reshape(n, cout, ho, wo)
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError("conv2d bias must have shape (cout,)")
        out_arr = out_arr + b.data.reshape(1, cout, 1, 1)
    out = Tensor(out_arr)

    def _bw(g):
        g2 = np.ascontiguousarray(g.reshape(n, cout, ho * wo))
        _accum(w, np.tensordot(g2, cols, axes=((0, 2), (0, 2))))
        gcols = np.matmul(w2.T, g2)
        _accum(x, K.col2im(gcols, n, cin, h, wd, kh, kw, stride, padding,
                           dilation, ho, wo))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    _record(out, _bw)
    return out


def depthwise_conv2d(x, w, stride=1, padding=1):
    n, c, h, wd = x.data.shape
    if w.data.shape[0] != c or w.data.shape[1] != 1:
        raise ValueError(f"depthwise kernel must be ({c},1,kh,kw), got {w.data.shape}")
    k = w.data.reshape(c, w.data.shape[2], w.data.shape[3])
    out = Tensor(K.depthwise_forward(x.data, k, stride, padding))

    def _bw(g):
        gx, gk = K.depthwise_backward(x.data, k, np.ascontiguousarray(g),
                                      stride, padding)
        _accum(x, gx)
        _accum(w, gk)

    _record(out, _bw)
    return out


def depthwise_separable_conv(x, dw, pw, b=None, stride=1, padding=1):
    """Per-channel 3x3 conv followed by a 1x1 pointwise conv."""
    return conv2d(depthwise_conv2d(x, dw, stride, padding), pw, b)


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("batch_norm gamma/beta must have shape (C,)")
    m = n * h * w
    g = gamma.data.reshape(1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batch_norm train mode needs N*H*W >= 2 per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = Tensor(g * xhat + beta.data.reshape(1, c, 1, 1))

        def _bw(gr):
            dxhat = gr * g
            iv = ivar.reshape(1, c, 1, 1)
            xc = x.data - mean.reshape(1, c, 1, 1)
            dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * -0.5 * ivar ** 3
            dmean = (-(dxhat * iv).sum(axis=(0, 2, 3))
                     + dvar * -2.0 * xc.mean(axis=(0, 2, 3)))
            dx = (dxhat * iv
                  + (2.0 / m) * dvar.reshape(1, c, 1, 1) * xc
                  + (1.0 / m) * dmean.reshape(1, c, 1, 1))
            _accum(x, dx)
            _accum(gamma, (gr * xhat).sum(axis=(0, 2, 3)))
            _accum(beta, gr.sum(axis=(0, 2, 3)))
    else:
        ivar = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * ivar).reshape(1, c, 1, 1)
        shift = (beta.data - gamma.data * running_mean * ivar).reshape(1, c, 1, 1)
        out = Tensor(x.data * scale + shift)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)

        def _bw(gr):
            _accum(x, gr * scale)
            _accum(gamma, (gr * xhat).sum(axis=(0, 2, 3)))
            _accum(beta, gr.sum(axis=(0, 2, 3)))

    _record(out, _bw)
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))

    def _bw(g):
        _accum(x, g * (x.data > 0.0))

    _record(out, _bw)
    return out


def sigmoid(x):
    # tanh formulation avoids overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = Tensor(y)

    def _bw(g):
        _accum(x, g * y * (1.0 - y))

    _record(out, _bw)
    return out


def softmax(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def _bw(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    _record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# pooling, resampling, structure


def global_avg_pool(x):
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def _bw(g):
        _accum(x, np.broadcast_to(g / (h * w), x.data.shape))

    _record(out, _bw)
    return out


def _interp_matrix(size_out, size_in):
    # align_corners=False row weights; rows sum to 1, edges clamped
    m = np.zeros((size_out, size_in))
    scale = size_in / size_out
    for i in range(size_out):
        src = (i + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        i0c = min(max(i0, 0), size_in - 1)
        i1c = min(max(i0 + 1, 0), size_in - 1)
        m[i, i0c] += 1.0 - t
        m[i, i1c] += t
    return m


def bilinear_upsample(x, factor):
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    n, c, h, w = x.data.shape
    mh = _interp_matrix(h * factor, h)
    mw = _interp_matrix(w * factor, w)
    out = Tensor(np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True))

    def _bw(g):
        _accum(x, np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True))

    _record(out, _bw)
    return out


def broadcast_spatial(x, h, w):
    """Tile an (N, C, 1, 1) tensor to (N, C, h, w)."""
    n, c, h0, w0 = x.data.shape
    if (h0, w0) != (1, 1):
        raise ValueError("broadcast_spatial expects 1x1 spatial input")
    out = Tensor(np.broadcast_to(x.data, (n, c, h, w)))

    def _bw(g):
        _accum(x, g.sum(axis=(2, 3), keepdims=True))

    _record(out, _bw)
    return out


def concat(a, b, axis=1):
    sa, sb = list(a.data.shape), list(b.data.shape)
    sa[axis] = sb[axis] = 0
    if sa != sb:
        raise ValueError(f"concat shape mismatch: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[axis]
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))

    def _bw(g):
        ga, gb = np.split(g, [na], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    _record(out, _bw)
    return out


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def _bw(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, _bw)
    return out


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def _bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, _bw)
    return out


def mul_channelwise(x, weights):
    n, c = x.data.shape[:2]
    if weights.data.shape != (n, c, 1, 1):
        raise ValueError(
            f"channel weights must be ({n},{c},1,1), got {weights.data.shape}")
    out = Tensor(x.data * weights.data)

    def _bw(g):
        _accum(x, g * weights.data)
        _accum(weights, (g * x.data).sum(axis=(2, 3), keepdims=True))

    _record(out, _bw)
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def _bw(g):
        _accum(x, g.reshape(x.data.shape))

    _record(out, _bw)
    return out


def narrow(x, axis, start, length):
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def _bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    _record(out, _bw)
    return out


def tsum(x):
    out = Tensor(np.array(x.data.sum()))

    def _bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    _record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits, labels, ignore_label=None):
    n, k, h, w = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels must be ({n},{h},{w}), got {labels.shape}")
    if ignore_label is None:
        valid = np.ones(labels.shape, dtype=bool)
    else:
        valid = labels != ignore_label
    scored = labels[valid]
    if scored.size and (scored.min() < 0 or scored.max() >= k):
        raise ValueError("label index out of range")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("all pixels ignored in cross_entropy_loss")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    out = Tensor(np.array(-(picked * valid).sum() / count))

    def _bw(g):
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (p - onehot) * valid[:, None] / count
        _accum(logits, g.reshape(()) * grad)

    _record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps the Tensor x to a scalar Tensor; f must not depend on mutable
    state (run modules in eval mode, or pass fresh stat buffers per call).
    """
    if isinstance(x, Parameter):
        x.zero_grad()
    else:
        x.grad = None
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
