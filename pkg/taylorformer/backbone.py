"""
The multi-branch encoder-decoder: a shallow convolution, four encoder stages
of multi-scale patch embedding, per-branch Transformer blocks and selective
kernel feature fusion (SKFF), three decoder stages joined to the encoder by
skip connections, optional refinement blocks and a residual image output.
"""

from __future__ import absolute_import
from __future__ import division
import json
from collections import OrderedDict

import numpy as np

from . import costmodel
from . import embedding
from . import tensor
from .attention import MsarConfig
from .attention import TransformerBlock
from .costmodel import CostEntry
from .costmodel import CostReport
from .errors import ConfigurationError
from .errors import DimensionError
from .errors import ShapeError
from .layers import Conv2d
from .layers import Module
from .layers import PReLU
from .tensor import label

IMAGE_CHANNELS = 3

DEFAULTS = OrderedDict([
    ("base_channels", 8),
    ("stage_channels", (8, 16, 16, 32)),
    ("stage_blocks", (1, 1, 1, 1)),
    ("branch_depths", (1, 2)),
    ("heads", (1, 2, 2, 4)),
    ("scale_factor", 2),
    ("norm_radius", 0.5),
    ("qkv_kernel", 3),
    ("msar_kernels", (3, 5, 7)),
    ("offset_bound", 3.0),
    ("embed_kernel", 3),
    ("ffn_expansion", 2),
    ("skff_reduction", 8),
    ("refinement_blocks", 0),
    ("use_msar", True),
])

PRESETS = {
    "tiny": {},
    "micro": {"base_channels": 4,
              "stage_channels": (4, 8, 8, 8),
              "heads": (1, 1, 1, 1),
              "branch_depths": (1, 2),
              "refinement_blocks": 1},
}


def _ints(value):
    return tuple(int(item) for item in value)


class NetworkConfig(object):
    """
    Every hyperparameter of a network. The configuration is a plain key-value
    document, see to_dict() and save().

    Parameters
    ----------
    base_channels : int
        c, channels produced by the shallow convolution.

    stage_channels : tuple
        Channels of each encoder stage; the first equals base_channels.

    stage_blocks : tuple
        Transformer blocks per branch in each stage.

    branch_depths : tuple
        DSDCN stack depth of each branch, either one tuple shared by every
        stage or one tuple per stage.

    heads : tuple
        Attention heads in each stage.

    scale_factor : int
        r, the pixel (un)shuffle factor between stages.

    use_msar : bool
        Gate the attention output with MSAR; False holds the gate at one.
    """
    def __init__(self, **kwargs):
        unknown = sorted(set(kwargs) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError("unknown network setting(s): {}".format(
                ", ".join(unknown)))
        values = OrderedDict(DEFAULTS)
        values.update(kwargs)
        try:
            self.base_channels = int(values["base_channels"])
            self.stage_channels = _ints(values["stage_channels"])
            self.stage_blocks = _ints(values["stage_blocks"])
            self.heads = _ints(values["heads"])
            self.scale_factor = int(values["scale_factor"])
            self.norm_radius = float(values["norm_radius"])
            self.qkv_kernel = int(values["qkv_kernel"])
            self.msar_kernels = _ints(values["msar_kernels"])
            self.offset_bound = float(values["offset_bound"])
            self.embed_kernel = int(values["embed_kernel"])
            self.ffn_expansion = int(values["ffn_expansion"])
            self.skff_reduction = int(values["skff_reduction"])
            self.refinement_blocks = int(values["refinement_blocks"])
            self.use_msar = bool(values["use_msar"])
            depths = tuple(values["branch_depths"])
            if depths and all(np.ndim(item) == 0 for item in depths):
                depths = (depths,) * len(self.stage_channels)
            self.branch_depths = tuple(_ints(item) for item in depths)
        except (TypeError, ValueError) as error:
            raise ConfigurationError("invalid network setting: {}".format(
                error))
        self._validate()

    def _validate(self):
        stages = len(self.stage_channels)
        if stages < 1:
            raise ConfigurationError("a network needs at least one stage")
        for name in ("stage_blocks", "heads", "branch_depths"):
            if len(getattr(self, name)) != stages:
                raise ConfigurationError("{} has {} entries for {} stages"
                                         .format(name,
                                                 len(getattr(self, name)),
                                                 stages))
        if self.stage_channels[0] != self.base_channels:
            raise ConfigurationError(
                "the first stage has {} channels but base_channels is {}"
                .format(self.stage_channels[0], self.base_channels))
        if min(self.stage_channels) < 1 or min(self.stage_blocks) < 1 or \
           min(self.heads) < 1 or self.refinement_blocks < 0:
            raise ConfigurationError("channels, blocks and heads have to be "
                                     "positive")
        for stage, (channels, heads) in enumerate(zip(self.stage_channels,
                                                      self.heads)):
            if channels % heads:
                raise ConfigurationError(
                    "stage {}: {} heads do not divide {} channels".format(
                        stage, heads, channels))
        if self.scale_factor < 1:
            raise ConfigurationError("scale factor has to be positive")
        blocks = self.scale_factor ** 2
        for stage, channels in enumerate(self.stage_channels[1:], 1):
            if channels % blocks:
                raise ConfigurationError(
                    "stage {}: {} channels are not a multiple of {}".format(
                        stage, channels, blocks))
        if self.norm_radius <= 0 or self.norm_radius > 0.5:
            raise ConfigurationError("the normalization radius has to lie in "
                                     "(0, 0.5], got {}".format(
                                         self.norm_radius))
        if self.skff_reduction < 1 or self.ffn_expansion < 1:
            raise ConfigurationError("reduction and expansion factors have "
                                     "to be positive")
        MsarConfig(self.msar_kernels)
        for depths in self.branch_depths:
            embedding.PatchEmbedConfig(depths, kernel=self.embed_kernel,
                                       offset_bound=self.offset_bound)

    @property
    def stages(self):
        return len(self.stage_channels)

    @property
    def divisor(self):
        "Image sides have to be multiples of this."
        return self.scale_factor ** (self.stages - 1)

    def embed_config(self, stage):
        return embedding.PatchEmbedConfig(self.branch_depths[stage],
                                          kernel=self.embed_kernel,
                                          offset_bound=self.offset_bound)

    def to_dict(self):
        document = OrderedDict()
        for key in DEFAULTS:
            value = getattr(self, key)
            if key == "branch_depths":
                value = [list(item) for item in value]
            elif isinstance(value, tuple):
                value = list(value)
            document[key] = value
        return document

    @classmethod
    def from_dict(cls, document):
        if not isinstance(document, dict):
            raise ConfigurationError("a network config has to be a key-value "
                                     "document")
        return cls(**document)

    def save(self, path):
        "Write this configuration as JSON."
        with open(path, "w") as config_file:
            json.dump(self.to_dict(), config_file, indent=2)
            config_file.write("\n")

    @classmethod
    def load(cls, path):
        "Read a configuration written by save()."
        try:
            with open(path) as config_file:
                document = json.load(config_file)
        except (IOError, OSError) as error:
            raise ConfigurationError("cannot read config '{}': {}".format(
                path, error))
        except ValueError as error:
            raise ConfigurationError("config '{}' is not valid JSON: {}"
                                     .format(path, error))
        return cls.from_dict(document)

    @classmethod
    def preset(cls, name, **overrides):
        "A named configuration, 'tiny' or 'micro'."
        if name not in PRESETS:
            raise ConfigurationError(
                "unknown preset '{}', expected one of: {}".format(
                    name, ", ".join(sorted(PRESETS))))
        settings = dict(PRESETS[name])
        settings.update(overrides)
        return cls(**settings)

    def __eq__(self, other):
        return isinstance(other, NetworkConfig) and \
            self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self == other


class SkffBlock(Module):
    """
    Selective kernel feature fusion: a pooled descriptor of the summed
    branches is squeezed to d channels and expanded to one logit per branch
    and channel.
    """
    def __init__(self, channels, branches, reduction=8, rng=None):
        squeezed = max(channels // reduction, 4)
        self.channels = channels
        self.squeeze = Conv2d(channels, squeezed, 1, rng)
        self.activation = PReLU()
        self.selectors = [Conv2d(squeezed, channels, 1, rng)
                          for _ in range(branches)]


def _check_branches(features, block):
    if not features:
        raise ConfigurationError("nothing to fuse")
    shapes = set(feature.shape for feature in features)
    if len(shapes) != 1:
        raise DimensionError("branch features differ in shape: {}".format(
            ", ".join(str(shape) for shape in sorted(shapes))))
    if len(features) != len(block.selectors):
        raise ConfigurationError("{} branches given to a block built for {}"
                                 .format(len(features), len(block.selectors)))
    if features[0].shape[-3] != block.channels:
        raise DimensionError("block fuses {} channels, features have shape {}"
                             .format(block.channels, features[0].shape))


def selection_weights(features, block):
    """Per-branch, per-channel weights of shape (..., branches, C, 1, 1) that
    sum to one over the branch axis."""
    _check_branches(features, block)
    total = features[0]
    for feature in features[1:]:
        total = total + feature
    pooled = tensor.mean(total, axis=(-2, -1), keepdims=True)
    descriptor = block.activation(block.squeeze(pooled))
    logits = tensor.stack([selector(descriptor)
                           for selector in block.selectors], axis=-4)
    return tensor.softmax(logits, axis=-4)


def skff_fuse(features, block):
    "Weighted sum of the branch features with weights from selection_weights."
    weights = selection_weights(features, block)
    fused = None
    for index, feature in enumerate(features):
        term = feature * weights[..., index, :, :, :]
        fused = term if fused is None else fused + term
    return fused


class MultiBranchBlock(Module):
    """
    Multi-scale patch embedding, a chain of Transformer blocks per branch and
    SKFF fusion of the branches.
    """
    def __init__(self, channels, heads, blocks, embed_config, config, rng):
        self.channels = channels
        self.embed = embedding.PatchEmbed(channels, embed_config, rng)
        msar = MsarConfig(config.msar_kernels)
        gate = "msar" if config.use_msar else "identity"
        self.branches = [[TransformerBlock(channels, heads, rng,
                                           config.norm_radius, msar,
                                           config.ffn_expansion, gate,
                                           config.qkv_kernel)
                          for _ in range(blocks)]
                         for _ in range(embed_config.branches)]
        self.skff = SkffBlock(channels, embed_config.branches,
                              config.skff_reduction, rng)

    def forward(self, x):
        tokens = self.embed(x)
        outputs = []
        for index, (y, chain) in enumerate(zip(tokens, self.branches)):
            for depth, block in enumerate(chain):
                with label("branch{}/block{}".format(index, depth)):
                    y = block(y)
            outputs.append(y)
        with label("skff"):
            return skff_fuse(outputs, self.skff)


class Network(Module):
    """
    The full dehazing network; forward(I) returns I + R for an image I of
    shape (3, h, w) or (B, 3, h, w).
    """
    def __init__(self, config, rng):
        self.config = config
        channels = config.stage_channels
        factor = config.scale_factor
        last = config.stages - 1
        self.shallow = Conv2d(IMAGE_CHANNELS, config.base_channels, 3, rng)
        self.encoders = [MultiBranchBlock(channels[stage], config.heads[stage],
                                          config.stage_blocks[stage],
                                          config.embed_config(stage), config,
                                          rng)
                         for stage in range(config.stages)]
        self.downs = [Conv2d(channels[stage], channels[stage + 1] //
                             factor ** 2, 1, rng) for stage in range(last)]
        self.ups = [Conv2d(channels[stage + 1], channels[stage] * factor ** 2,
                           1, rng) for stage in range(last)]
        self.reduces = [Conv2d(2 * channels[stage], channels[stage], 1, rng)
                        for stage in range(1, last)]
        self.decoders = [MultiBranchBlock(self.decoder_channels(stage),
                                          config.heads[stage],
                                          config.stage_blocks[stage],
                                          config.embed_config(stage), config,
                                          rng)
                         for stage in range(last)]
        self.refinement = [MultiBranchBlock(self.decoder_channels(0),
                                            config.heads[0],
                                            config.stage_blocks[0],
                                            config.embed_config(0), config,
                                            rng)
                           for _ in range(config.refinement_blocks)]
        self.output = Conv2d(self.decoder_channels(0), IMAGE_CHANNELS, 3, rng)

    def decoder_channels(self, stage):
        "Channels of decoder stage; the first keeps the concatenated skip."
        if stage == 0 and self.config.stages > 1:
            return 2 * self.config.stage_channels[0]
        return self.config.stage_channels[stage]

    def check_input(self, image):
        if image.ndim not in (3, 4) or image.shape[-3] != IMAGE_CHANNELS:
            raise DimensionError("expected a (3, h, w) image, got {}".format(
                image.shape))
        height, width = image.shape[-2:]
        divisor = self.config.divisor
        if height % divisor or width % divisor:
            raise ShapeError("image sides {}x{} are not multiples of {}"
                             .format(height, width, divisor))

    def forward(self, image):
        image = tensor._lift(image)
        self.check_input(image)
        factor = self.config.scale_factor
        last = self.config.stages - 1
        with label("shallow"):
            features = self.shallow(image)
        skips = []
        for stage, encoder in enumerate(self.encoders):
            with label("encoder{}".format(stage)):
                features = encoder(features)
            if stage < last:
                skips.append(features)
                with label("down{}".format(stage)):
                    features = embedding.pixel_unshuffle(
                        self.downs[stage](features), factor)
        for stage in reversed(range(last)):
            with label("up{}".format(stage)):
                features = embedding.pixel_shuffle(self.ups[stage](features),
                                                   factor)
            features = tensor.concat([features, skips[stage]], axis=-3)
            if stage > 0:
                with label("reduce{}".format(stage)):
                    features = self.reduces[stage - 1](features)
            with label("decoder{}".format(stage)):
                features = self.decoders[stage](features)
        for index, block in enumerate(self.refinement):
            with label("refinement{}".format(index)):
                features = block(features)
        with label("output"):
            residual = self.output(features)
        return image + residual

    def blocks(self):
        "Yields (label path, MultiBranchBlock, stage) of every block."
        for stage, block in enumerate(self.encoders):
            yield "encoder{}".format(stage), block, stage
        for stage, block in enumerate(self.decoders):
            yield "decoder{}".format(stage), block, stage
        for index, block in enumerate(self.refinement):
            yield "refinement{}".format(index), block, 0


def _conv_entry(name, in_channels, out_channels, kernel, height, width):
    macs = in_channels * out_channels * kernel * kernel * height * width
    return CostEntry(name, macs, in_channels * out_channels * kernel * kernel,
                     exact=True)


def _block_entries(prefix, channels, heads, blocks, depths, config, height,
                   width):
    tokens = height * width
    kernel = config.embed_kernel
    msar = MsarConfig(config.msar_kernels)
    entries = []
    for branch, depth in enumerate(depths):
        for layer in range(depth):
            macs, params = embedding.dsdcn_cost(channels, channels, kernel,
                                                height, width)
            entries.append(CostEntry(
                "{}/embed/branch{}/layer{}/dsdcn".format(prefix, branch,
                                                         layer),
                macs, params, reference_macs=macs, exact=True))
    hidden = config.ffn_expansion * channels
    for branch in range(len(depths)):
        for block in range(blocks):
            path = "{}/branch{}/block{}".format(prefix, branch, block)
            reference = None
            if heads == 1 and config.use_msar and msar.kernel(0) == 3:
                reference = costmodel.tmsa_macs_square(height, width, channels)
            entries.append(CostEntry(
                path + "/tmsa",
                costmodel.tmsa_macs(tokens, channels, heads,
                                    config.msar_kernels, config.use_msar),
                costmodel.tmsa_params(channels, heads, config.msar_kernels,
                                      config.qkv_kernel),
                reference_macs=reference, exact=True))
            entries.append(CostEntry(
                path + "/tmsa/plumbing",
                3 * channels * config.qkv_kernel ** 2 * tokens, 0))
            entries.append(CostEntry(
                path + "/ffn",
                (channels * 2 * hidden + 2 * hidden * 9 + hidden * channels) *
                tokens,
                channels + channels * 2 * hidden + 2 * hidden * 9 +
                hidden * channels))
    squeezed = max(channels // config.skff_reduction, 4)
    entries.append(CostEntry(prefix + "/skff",
                             (1 + len(depths)) * channels * squeezed,
                             (1 + len(depths)) * channels * squeezed + 1))
    return entries


def count_costs(config, height, width):
    """Analytic multiplies and parameters of every part of a network.

    T-MSA and DSDCN entries (and the plain convolutions between stages) are
    exact: an instrumented forward pass performs exactly their number of
    multiplies under the same label. The remaining entries hold the
    multiplies of their convolutions only.

    Parameters
    ----------
    config : NetworkConfig
        The network.

    height, width : int
        Image size; multiples of config.divisor.

    Returns
    -------
    report : CostReport
        One entry per part, with the label path of the part as its name.
    """
    if height % config.divisor or width % config.divisor:
        raise ShapeError("image sides {}x{} are not multiples of {}".format(
            height, width, config.divisor))
    channels = config.stage_channels
    factor = config.scale_factor
    last = config.stages - 1
    costs = CostReport(height, width)
    costs.add(_conv_entry("shallow", IMAGE_CHANNELS, config.base_channels, 3,
                          height, width))
    size = [(height // factor ** stage, width // factor ** stage)
            for stage in range(config.stages)]
    for stage in range(config.stages):
        for entry in _block_entries("encoder{}".format(stage),
                                    channels[stage], config.heads[stage],
                                    config.stage_blocks[stage],
                                    config.branch_depths[stage], config,
                                    *size[stage]):
            costs.add(entry)
        if stage < last:
            costs.add(_conv_entry("down{}".format(stage), channels[stage],
                                  channels[stage + 1] // factor ** 2, 1,
                                  *size[stage]))
    for stage in reversed(range(last)):
        costs.add(_conv_entry("up{}".format(stage), channels[stage + 1],
                              channels[stage] * factor ** 2, 1,
                              *size[stage + 1]))
        width_channels = channels[stage]
        if stage > 0:
            costs.add(_conv_entry("reduce{}".format(stage),
                                  2 * channels[stage], channels[stage], 1,
                                  *size[stage]))
        else:
            width_channels = 2 * channels[0]
        for entry in _block_entries("decoder{}".format(stage), width_channels,
                                    config.heads[stage],
                                    config.stage_blocks[stage],
                                    config.branch_depths[stage], config,
                                    *size[stage]):
            costs.add(entry)
    top = 2 * channels[0] if last else channels[0]
    for index in range(config.refinement_blocks):
        for entry in _block_entries("refinement{}".format(index),
                                    top, config.heads[0],
                                    config.stage_blocks[0],
                                    config.branch_depths[0], config,
                                    height, width):
            costs.add(entry)
    costs.add(_conv_entry("output", top, IMAGE_CHANNELS, 3, height,
                          width))
    return costs


def measure_costs(network, height, width, rng):
    """Run one instrumented forward pass on a random image and fill in the
    measured multiplies and wall time of every entry of count_costs."""
    costs = count_costs(network.config, height, width)
    image = tensor.Tensor(rng.uniform(0, 1, (IMAGE_CHANNELS, height, width)))
    with tensor.MultiplyCounter() as counter:
        network(image)
    for entry in costs:
        if entry.exact:
            entry.instrumented_macs = counter.exact(entry.name)
        else:
            entry.instrumented_macs = counter.within(entry.name)
        entry.wall_time = counter.times.get(entry.name)
    return costs
