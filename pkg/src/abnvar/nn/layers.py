"""Parameter-owning layers built on the fused ops."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import DTYPE, ContractError, Tensor, concat, parameter


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Module:
    """Base class: tracks parameters, buffers and child modules by name."""

    def __init__(self):
        self._params = OrderedDict()
        self._buffers = OrderedDict()
        self._children = OrderedDict()

    def add_param(self, name, data):
        t = parameter(data, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, data):
        self._buffers[name] = np.asarray(data, dtype=DTYPE)
        return self._buffers[name]

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        """Parameter arrays keyed by dotted name (views, not copies)."""
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_arrays(self, arrays, buffers=None):
        for name, p in self.named_parameters():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ContractError(f"shape mismatch loading {name}: {src.shape} vs {p.data.shape}")
            p.data = np.array(src, dtype=DTYPE, copy=True)
        if buffers is not None:
            for name, b in self.named_buffers():
                b[...] = buffers[name]


class Dense(Module):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.weight = self.add_param("weight", _uniform(rng, (n_in, n_out), n_in))
        self.bias = self.add_param("bias", _uniform(rng, (n_out,), n_in))

    def __call__(self, x):
        return F.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding, self.kernel = stride, padding, kernel
        fan_in = c_in * kernel * kernel
        self.weight = self.add_param("weight", _uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", _uniform(rng, (c_out,), fan_in))

    def output_size(self, size):
        return F.conv_output_size(size, self.kernel, self.stride, self.padding)

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.99, eps=1e-5, per_sample=False):
        super().__init__()
        self.momentum, self.eps, self.per_sample = momentum, eps, per_sample
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x, training=True, update_stats=True):
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.momentum, self.eps, update_stats, self.per_sample)


class LSTMCell(Module):
    def __init__(self, n_in, hidden, rng):
        super().__init__()
        self.hidden = hidden
        self.w_x = self.add_param("w_x", _uniform(rng, (n_in, 4 * hidden), n_in))
        self.w_h = self.add_param("w_h", _uniform(rng, (hidden, 4 * hidden), hidden))
        self.bias = self.add_param("bias", _uniform(rng, (4 * hidden,), hidden))

    def __call__(self, x, h, c):
        hc = F.lstm_cell(x, h, c, self.w_x, self.w_h, self.bias)
        return hc[:, 0], hc[:, 1]

    def sequence(self, xs, h, c):
        """Unroll over the rows of ``xs``; returns the stacked hidden states and final (h, c)."""
        zx = F.dense(xs, self.w_x, self.bias)
        hs = []
        for t in range(xs.shape[0]):
            hc = F.lstm_recurrent(zx[t:t + 1] if xs.shape[0] > 1 else zx, h, c, self.w_h)
            h, c = hc[:, 0], hc[:, 1]
            hs.append(h)
        return (hs[0] if len(hs) == 1 else concat(hs, axis=0)), (h, c)

    def zero_state(self, batch=1):
        return np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))
