"""
Depthwise-separable deformable convolution (DSDCN), the multi-scale patch
embedding built from stacks of it and the pixel (un)shuffle resamplers.
"""

from __future__ import absolute_import
from __future__ import division
import math

import numpy as np

from . import tensor
from .errors import ConfigurationError
from .errors import DimensionError
from .errors import ShapeError
from .layers import Conv2d
from .layers import Module
from .layers import uniform
from .tensor import label

OFFSET_BOUND = 3.0


def _check_kernel(kernel):
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigurationError("kernel size has to be odd, got {}"
                                 .format(kernel))


class DsdcnLayer(Module):
    """
    A depthwise-separable deformable convolution.

    Sampling offsets are predicted from the input by a K x K depthwise and a
    pointwise convolution and truncated to [-offset_bound, offset_bound]. The
    input is then sampled at the displaced kernel taps, weighted by a K x K
    depthwise kernel and mixed by a pointwise convolution. The last offset
    layer starts at zero, so an untrained layer is a plain separable
    convolution.

    Parameters
    ----------
    in_channels : int
        M, channels of the input.

    out_channels : int
        N, channels of the output.

    kernel : int
        K, odd kernel size.

    offset_bound : float
        Largest absolute offset, in pixels.

    rng : numpy.random.Generator
        Source of the initial weights.
    """
    def __init__(self, in_channels, out_channels, kernel=3,
                 offset_bound=OFFSET_BOUND, rng=None):
        _check_kernel(kernel)
        if offset_bound < 0:
            raise ConfigurationError("offset bound has to be non-negative, "
                                     "got {}".format(offset_bound))
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.offset_bound = offset_bound
        self.max_offset_seen = 0.0
        self.offset_dwconv = Conv2d(in_channels, in_channels, kernel, rng,
                                    groups=in_channels)
        self.offset_pwconv = Conv2d(in_channels, 2 * kernel * kernel, 1,
                                    zero=True)
        self.weight = uniform((in_channels, 1, kernel, kernel),
                              kernel * kernel, rng)
        self.pwconv = Conv2d(in_channels, out_channels, 1, rng)

    def offsets(self, x):
        "Predicted offsets of x, truncated to the offset bound."
        raw = self.offset_pwconv(self.offset_dwconv(x))
        offsets = tensor.clamp(raw, -self.offset_bound, self.offset_bound)
        if offsets.size:
            self.max_offset_seen = max(self.max_offset_seen,
                                       float(np.max(np.abs(offsets.data))))
        return offsets

    def forward(self, x):
        return dsdcn_forward(x, self)


def _check_input(x, layer):
    if x.ndim not in (3, 4) or x.shape[-3] != layer.in_channels:
        raise DimensionError("layer expects {} input channels, got input {}"
                             .format(layer.in_channels, x.shape))


def dsdcn_forward(x, layer):
    """Apply a DSDCN layer: predict offsets, sample the deformed windows,
    weight them per channel and mix the channels pointwise.

    Parameters
    ----------
    x : Tensor
        Input of shape (M, H, W) or (B, M, H, W).

    layer : DsdcnLayer
        Offset predictor, depthwise weight and pointwise mix.

    Returns
    -------
    y : Tensor
        Output with the spatial size of x and layer.out_channels channels.
    """
    x = tensor._lift(x)
    _check_input(x, layer)
    with label("dsdcn"):
        offsets = layer.offsets(x)
        cols = tensor.deform_sample(x, offsets, layer.kernel)
        return layer.pwconv(tensor.depthwise_apply(cols, layer.weight))


def separable_forward(x, layer):
    """The plain depthwise-separable convolution with the weights of layer;
    what dsdcn_forward computes when every offset is zero."""
    x = tensor._lift(x)
    _check_input(x, layer)
    depthwise = tensor.conv2d(x, layer.weight, padding=layer.kernel // 2,
                              groups=layer.in_channels)
    return layer.pwconv(depthwise)


class PatchEmbedConfig(object):
    """
    Branches of a multi-scale patch embedding.

    Parameters
    ----------
    depths : tuple
        Number of stacked DSDCN layers per branch.

    channels : tuple or None
        Output channels per branch; None gives every branch the channels of
        the stage it embeds for.

    kernel : int
        Kernel size of every DSDCN layer.

    offset_bound : float
        Offset truncation of every DSDCN layer.
    """
    def __init__(self, depths=(1, 2), channels=None, kernel=3,
                 offset_bound=OFFSET_BOUND):
        depths = tuple(int(depth) for depth in depths)
        if not depths or min(depths) < 1:
            raise ConfigurationError("every branch needs at least one layer, "
                                     "got depths {}".format(depths))
        if channels is not None:
            channels = tuple(int(channel) for channel in channels)
            if len(channels) != len(depths) or min(channels) < 1:
                raise ConfigurationError(
                    "{} branch channels given for {} branches".format(
                        len(channels), len(depths)))
        _check_kernel(kernel)
        self._depths = depths
        self._channels = channels
        self._kernel = kernel
        self._offset_bound = offset_bound

    @property
    def depths(self):
        return self._depths

    @property
    def channels(self):
        return self._channels

    @property
    def kernel(self):
        return self._kernel

    @property
    def offset_bound(self):
        return self._offset_bound

    @property
    def branches(self):
        "Number of branches."
        return len(self._depths)

    def branch_channels(self, default):
        "Output channels of each branch."
        return self._channels or (default,) * self.branches

    def field_ranges(self, kernel=None, bound=None):
        """Returns the (smallest, largest) receptive field side length of each
        branch. A branch of depth d spans at most d * (K - 1 + 2 * bound) + 1
        pixels, so deeper branches see coarser tokens."""
        kernel = self._kernel if kernel is None else kernel
        bound = self._offset_bound if bound is None else bound
        return [(1, 2 * receptive_radius(kernel, bound, depth) + 1)
                for depth in self._depths]


class PatchEmbed(Module):
    "One stack of DSDCN layers per branch."
    def __init__(self, in_channels, config, rng, out_channels=None):
        out_channels = in_channels if out_channels is None else out_channels
        self.config = config
        self.in_channels = in_channels
        self.branches = []
        for depth, channels in zip(config.depths,
                                   config.branch_channels(out_channels)):
            stack = []
            for layer in range(depth):
                stack.append(DsdcnLayer(in_channels if layer == 0 else
                                        channels, channels, config.kernel,
                                        config.offset_bound, rng))
            self.branches.append(stack)

    @property
    def max_offset_seen(self):
        return max(layer.max_offset_seen for stack in self.branches
                   for layer in stack)

    def forward(self, x):
        return multi_scale_embed(x, self)


def multi_scale_embed(x, embed):
    """Embed x once per branch.

    Parameters
    ----------
    x : Tensor
        Feature map of shape (C, H, W) or (B, C, H, W).

    embed : PatchEmbed
        The branch stacks.

    Returns
    -------
    tokens : list
        One token map per branch, each of the spatial size of x.
    """
    if not embed.branches:
        raise ConfigurationError("a patch embedding needs at least one branch")
    tokens = []
    with label("embed"):
        for index, stack in enumerate(embed.branches):
            with label("branch{}".format(index)):
                y = x
                for depth, layer in enumerate(stack):
                    with label("layer{}".format(depth)):
                        y = tensor.hardswish(dsdcn_forward(y, layer))
            tokens.append(y)
    return tokens


def _check_factor(x, factor):
    if factor < 1:
        raise ConfigurationError("scale factor has to be positive, got {}"
                                 .format(factor))
    if x.ndim < 3:
        raise DimensionError("expected a (..., C, H, W) map, got {}"
                             .format(x.shape))


def pixel_unshuffle(x, factor=2):
    """Space to depth: (..., C, H, W) to (..., C * r^2, H / r, W / r).

    Parameters
    ----------
    x : Tensor
        Map whose sides are multiples of factor.

    factor : int
        r, the side of the blocks folded into channels.

    Returns
    -------
    y : Tensor
        The folded map; channel c * r^2 + i * r + j holds block offset (i, j)
        of input channel c.
    """
    x = tensor._lift(x)
    _check_factor(x, factor)
    height, width = x.shape[-2:]
    if height % factor or width % factor:
        raise ShapeError("a {}x{} map cannot be split into {}x{} blocks"
                         .format(height, width, factor, factor))
    return tensor.rearrange(x, "... c (h r1) (w r2) -> ... (c r1 r2) h w",
                            r1=factor, r2=factor)


def pixel_shuffle(x, factor=2):
    "Depth to space; the inverse of pixel_unshuffle."
    x = tensor._lift(x)
    _check_factor(x, factor)
    if x.shape[-3] % (factor * factor):
        raise ShapeError("{} channels cannot be folded into {}x{} blocks"
                         .format(x.shape[-3], factor, factor))
    return tensor.rearrange(x, "... (c r1 r2) h w -> ... c (h r1) (w r2)",
                            r1=factor, r2=factor)


def _check_dims(*dims):
    if any(int(dim) != dim or dim < 1 for dim in dims):
        raise ConfigurationError("cost dimensions have to be positive "
                                 "integers, got {}".format(dims))


def dsdcn_cost(in_channels, out_channels, kernel, height, width):
    """Multiplies and parameters of one DSDCN layer.

    The multiplies are the depthwise (MK^2) and pointwise (2MK^2) offset
    convolutions, four bilinear weights per sample (4MK^2), the depthwise
    weighting (MK^2) per pixel and the pointwise mix (MN) per pixel:

        macs   = 8 M K^2 h w + M N h w
        params = 4 M K^2 + M N

    Parameters
    ----------
    in_channels, out_channels : int
        M and N.

    kernel : int
        K.

    height, width : int
        h and w, the size of the output map.

    Returns
    -------
    cost : tuple
        (macs, params)
    """
    _check_dims(in_channels, out_channels, kernel, height, width)
    taps = kernel * kernel
    pixels = height * width
    macs = 8 * in_channels * taps * pixels + in_channels * out_channels * \
        pixels
    params = 4 * in_channels * taps + in_channels * out_channels
    return macs, params


def dcn_cost(in_channels, out_channels, kernel, height, width):
    """Multiplies and parameters of a standard deformable convolution:

        macs   = 2 M K^4 h w + M N K^2 h w + 4 M K^2 h w
        params = 2 M K^4 + M N K^2

    Returns
    -------
    cost : tuple
        (macs, params)
    """
    _check_dims(in_channels, out_channels, kernel, height, width)
    taps = kernel * kernel
    pixels = height * width
    macs = 2 * in_channels * taps * taps * pixels + \
        in_channels * out_channels * taps * pixels + \
        4 * in_channels * taps * pixels
    params = 2 * in_channels * taps * taps + in_channels * out_channels * taps
    return macs, params


def receptive_radius(kernel=3, bound=OFFSET_BOUND, layers=1):
    """Largest distance, per axis, between an output pixel and an input pixel
    that can influence it through a stack of DSDCN layers. Every layer reaches
    (K - 1) / 2 taps plus the truncated offset, rounded up for the bilinear
    neighbour.

    Parameters
    ----------
    kernel : int
        K, the side of the sampling grid.

    bound : float
        Offsets are truncated to [-bound, bound].

    layers : int
        Depth of the stack.

    Returns
    -------
    radius : int
        The field of the stack spans 2 * radius + 1 pixels per axis.
    """
    _check_kernel(kernel)
    return layers * ((kernel - 1) // 2 + int(math.ceil(bound)))
