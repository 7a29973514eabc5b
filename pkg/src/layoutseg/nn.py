"""Small module system: parameter registration, naming, mode switching."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, arr):
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, flag=True):
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Mark all parameters non-trainable; BN switches to fixed stats."""
        for p in self.parameters():
            p.trainable = False
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.frozen = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._list)), m)
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def kaiming_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, dilation=1,
                 bias=True, zero_init=False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = kaiming_normal(rng, (cout, cin, k, k), cin * k * k)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride,
                         self.padding, self.dilation)

    __call__ = forward


class SeparableConv2d(Module):
    """Depthwise 3x3 followed by pointwise 1x1."""

    def __init__(self, cin, cout, rng, bias=True):
        super().__init__()
        self.depthwise = Parameter(kaiming_normal(rng, (cin, 1, 3, 3), 9))
        self.pointwise = Parameter(kaiming_normal(rng, (cout, cin, 1, 1), cin))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return ad.depthwise_separable_conv(x, self.depthwise, self.pointwise,
                                           self.bias)

    __call__ = forward


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x):
        training = self.training and not self.frozen
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, self.momentum,
                             self.eps)

    __call__ = forward
