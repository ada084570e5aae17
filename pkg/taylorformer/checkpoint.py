"""
Weight files.

A weight file starts with a text manifest and continues with the raw
weights:

    TAYLORFORMER-WEIGHTS 1
    <number of tensors>
    <name> <extent> <extent> ...      (one line per tensor)

followed by every tensor, in manifest order, as 32-bit little-endian floats.
"""

from __future__ import absolute_import
import io

import numpy as np

from . import report
from .errors import ConfigurationError

MAGIC = "TAYLORFORMER-WEIGHTS"
FORMAT_VERSION = 1
STORAGE = np.dtype("<f4")


def save_weights(path, module, display=True):
    """Write every parameter of module to path. Parameters wider than 32 bits
    are rounded, with a warning."""
    parameters = list(module.named_parameters())
    rounded = [name for name, parameter in parameters
               if parameter.dtype.itemsize > STORAGE.itemsize]
    if rounded:
        report.warning("{} of {} tensors are rounded to 32 bits in '{}'; "
                       "train with '--precision f32' for an exact copy"
                       .format(len(rounded), len(parameters), path),
                       display=display)
    manifest = ["{} {}".format(MAGIC, FORMAT_VERSION), str(len(parameters))]
    for name, parameter in parameters:
        manifest.append(" ".join([name] + [str(extent) for extent in
                                           parameter.shape]))
    with io.open(path, "wb") as weights_file:
        weights_file.write(("\n".join(manifest) + "\n").encode("ascii"))
        for _, parameter in parameters:
            weights_file.write(np.ascontiguousarray(
                parameter.data, dtype=STORAGE).tobytes())


def read_weights(path):
    """Returns the (name, array) pairs stored in the weight file at path, in
    stored order."""
    try:
        with io.open(path, "rb") as weights_file:
            header = weights_file.readline().decode("ascii").split()
            if len(header) != 2 or header[0] != MAGIC:
                raise ConfigurationError("'{}' is not a weight file".format(
                    path))
            if int(header[1]) != FORMAT_VERSION:
                raise ConfigurationError(
                    "'{}' has weight format {}, expected {}".format(
                        path, header[1], FORMAT_VERSION))
            count = int(weights_file.readline())
            manifest = []
            for _ in range(count):
                fields = weights_file.readline().decode("ascii").split()
                manifest.append((fields[0], tuple(int(extent) for extent
                                                  in fields[1:])))
            payload = weights_file.read()
    except ConfigurationError:
        raise
    except (IOError, OSError) as error:
        raise ConfigurationError("cannot read weights '{}': {}".format(
            path, error))
    except (ValueError, IndexError, UnicodeDecodeError):
        raise ConfigurationError("the manifest of '{}' is corrupt".format(
            path))
    arrays = []
    offset = 0
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64))
        end = offset + size * STORAGE.itemsize
        if end > len(payload):
            raise ConfigurationError("'{}' is truncated at '{}'".format(
                path, name))
        arrays.append((name, np.frombuffer(payload[offset:end], dtype=STORAGE)
                       .reshape(shape)))
        offset = end
    if offset != len(payload):
        raise ConfigurationError("'{}' has {} trailing bytes".format(
            path, len(payload) - offset))
    return arrays


def load_weights(path, module):
    """Replace the parameters of module with the weights stored at path.
    Names and shapes have to match exactly."""
    stored = read_weights(path)
    parameters = list(module.named_parameters())
    if [name for name, _ in stored] != [name for name, _ in parameters]:
        missing = set(name for name, _ in parameters) - \
            set(name for name, _ in stored)
        unexpected = set(name for name, _ in stored) - \
            set(name for name, _ in parameters)
        raise ConfigurationError(
            "'{}' does not fit this network (missing: {}; unexpected: {})"
            .format(path, ", ".join(sorted(missing)) or "none",
                    ", ".join(sorted(unexpected)) or "none"))
    for (name, array), (_, parameter) in zip(stored, parameters):
        if array.shape != parameter.shape:
            raise ConfigurationError("'{}' stores {} with shape {}, the "
                                     "network expects {}".format(
                                         path, name, array.shape,
                                         parameter.shape))
    for (_, array), (_, parameter) in zip(stored, parameters):
        parameter.data = array.astype(parameter.dtype)
        parameter.grad = None
    return module
