"""
Parameter containers shared by the network modules.
"""

from __future__ import absolute_import
from __future__ import division
import math
from collections import OrderedDict

import numpy as np

from . import tensor
from .errors import ConfigurationError
from .tensor import Tensor


class Parameter(Tensor):
    "A leaf tensor that always requires a gradient."
    def __init__(self, data, name=None):
        super(Parameter, self).__init__(data, requires_grad=True, name=name)


def uniform(shape, fan_in, rng):
    "Weights drawn uniformly from +-1/sqrt(fan_in)."
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module(object):
    """
    A container of parameters and submodules. Parameters are found by walking
    the attributes of an instance in the order they were assigned, including
    lists and tuples of modules.
    """
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        "Yields (dotted name, Parameter) pairs."
        for name, value in vars(self).items():
            for item in _walk(value, prefix + name):
                yield item

    def parameters(self):
        return [parameter for _, parameter in self.named_parameters()]

    def zero_grad(self):
        "Clear the accumulated gradient of every parameter."
        for parameter in self.parameters():
            parameter.grad = None

    def num_parameters(self):
        "Total number of scalar weights."
        return int(np.sum([parameter.size for parameter in self.parameters()],
                          dtype=np.int64))

    def state_dict(self):
        return OrderedDict((name, parameter.data)
                           for name, parameter in self.named_parameters())


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        for item in value.named_parameters(name + "."):
            yield item
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            for pair in _walk(item, "{}.{}".format(name, index)):
                yield pair


class Conv2d(Module):
    """
    A 2-D convolution with 'same' padding by default. The weight is drawn
    uniformly from +-1/sqrt(fan_in); set zero=True to start from zeros.
    """
    def __init__(self, in_channels, out_channels, kernel_size=1, rng=None,
                 stride=1, padding=None, groups=1, bias=False, zero=False):
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                "groups={} has to divide both {} input and {} output "
                "channels".format(groups, in_channels, out_channels))
        if rng is None and not zero:
            raise ConfigurationError("a random generator is required to "
                                     "initialize a convolution")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel_size,
                 kernel_size)
        fan_in = in_channels // groups * kernel_size * kernel_size
        if zero:
            self.weight = Parameter(np.zeros(shape))
        else:
            self.weight = uniform(shape, fan_in, rng)
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(out_channels)) if zero else \
                uniform((out_channels,), fan_in, rng)

    def forward(self, x):
        return tensor.conv2d(x, self.weight, self.bias, self.stride,
                             self.padding, self.groups)

    def macs(self, height, width):
        "Multiplies performed on a height x width input."
        out_h = (height + 2 * self.padding - self.kernel_size) // \
            self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel_size) // \
            self.stride + 1
        return self.weight.size * out_h * out_w


class LayerNorm(Module):
    """
    Bias-free layer normalization over the channel axis of a (..., C, H, W)
    map: x / sqrt(var_c(x) + eps) * weight.
    """
    def __init__(self, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self.weight = Parameter(np.ones(channels))

    def forward(self, x):
        centered = x - tensor.mean(x, axis=-3, keepdims=True)
        variance = tensor.mean(centered * centered, axis=-3, keepdims=True)
        scale = tensor.reshape(self.weight, (self.channels, 1, 1))
        return x / tensor.sqrt(variance + self.eps) * scale


class PReLU(Module):
    "Parametric ReLU with one shared slope."
    def __init__(self, init=0.25):
        self.alpha = Parameter(np.full(1, init))

    def forward(self, x):
        return tensor.prelu(x, self.alpha)
