"""
Reading and writing images as (3, h, w) float arrays in [0, 1].

Binary PPM (P6, 8-bit) is always available; PNG needs Matplotlib.
"""

from __future__ import absolute_import
from __future__ import division
import io
import os

import numpy as np

from . import report
from .errors import ConfigurationError

try:
    import matplotlib as mpl
    if "DISPLAY" not in os.environ:
        mpl.use("agg")
    import matplotlib.image as mpimg
    MATPLOTLIB = True
except ImportError:
    MATPLOTLIB = False

PPM_EXTENSIONS = {".ppm", ".pnm"}
PNG_EXTENSIONS = {".png"}
IMAGE_EXTENSIONS = PPM_EXTENSIONS | PNG_EXTENSIONS
CLEAN_SUFFIX = "_clean"
HAZY_SUFFIX = "_hazy"


def _extension(path):
    return os.path.splitext(str(path))[1].lower()


def _require_png(path):
    if not MATPLOTLIB:
        raise ConfigurationError("install Matplotlib (https://matplotlib.org/)"
                                 " to read or write PNG files such as '{}'"
                                 .format(path))


def _tokens(stream):
    "Yields the whitespace separated header fields of a PPM file."
    while True:
        token = b""
        char = stream.read(1)
        while char.isspace():
            char = stream.read(1)
        while char == b"#":
            stream.readline()
            char = stream.read(1)
            while char.isspace():
                char = stream.read(1)
        while char and not char.isspace():
            token += char
            char = stream.read(1)
        yield token


def read_ppm(path):
    "Read a binary 8-bit PPM file."
    try:
        with io.open(path, "rb") as ppm_file:
            fields = _tokens(ppm_file)
            magic = next(fields)
            if magic != b"P6":
                raise ConfigurationError("'{}' is not a binary PPM file"
                                         .format(path))
            width, height, maxval = (int(next(fields)) for _ in range(3))
            if maxval != 255:
                raise ConfigurationError("'{}' is not an 8-bit PPM file"
                                         .format(path))
            pixels = ppm_file.read(width * height * 3)
    except ConfigurationError:
        raise
    except (IOError, OSError) as error:
        raise ConfigurationError("cannot read '{}': {}".format(path, error))
    except ValueError:
        raise ConfigurationError("the header of '{}' is corrupt".format(path))
    if len(pixels) != width * height * 3:
        raise ConfigurationError("'{}' is truncated".format(path))
    image = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return image.transpose(2, 0, 1).astype(np.float64) / 255


def to_bytes(image):
    "Quantize a (3, h, w) image in [0, 1] to 8-bit (h, w, 3)."
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError("expected a (3, h, w) image, got {}".format(
            image.shape))
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(
        1, 2, 0)


def write_ppm(path, image):
    "Write a (3, h, w) image in [0, 1] as a binary 8-bit PPM file."
    pixels = to_bytes(image)
    height, width = pixels.shape[:2]
    with io.open(path, "wb") as ppm_file:
        ppm_file.write("P6\n{} {}\n255\n".format(width, height).encode(
            "ascii"))
        ppm_file.write(np.ascontiguousarray(pixels).tobytes())


def read_image(path):
    """Read a PPM or PNG file.

    Returns
    -------
    image : numpy.ndarray
        A (3, h, w) float array in [0, 1].
    """
    extension = _extension(path)
    if extension in PPM_EXTENSIONS:
        return read_ppm(path)
    if extension in PNG_EXTENSIONS:
        _require_png(path)
        try:
            pixels = mpimg.imread(path)
        except (IOError, OSError, ValueError) as error:
            raise ConfigurationError("cannot read '{}': {}".format(path,
                                                                   error))
        if pixels.ndim == 2:
            pixels = np.stack([pixels] * 3, axis=-1)
        pixels = np.asarray(pixels[..., :3], dtype=np.float64)
        if pixels.max() > 1:
            pixels = pixels / 255
        return pixels.transpose(2, 0, 1)
    raise ConfigurationError("unknown image format '{}', expected one of: {}"
                             .format(extension,
                                     ", ".join(sorted(IMAGE_EXTENSIONS))))


def write_image(path, image):
    "Write a (3, h, w) image in [0, 1] as PPM or PNG, by extension."
    extension = _extension(path)
    if extension in PPM_EXTENSIONS:
        write_ppm(path, image)
    elif extension in PNG_EXTENSIONS:
        _require_png(path)
        mpimg.imsave(path, to_bytes(image))
    else:
        raise ConfigurationError(
            "unknown image format '{}', expected one of: {}".format(
                extension, ", ".join(sorted(IMAGE_EXTENSIONS))))


def pairs_from_directory(directory):
    """Takes the path to a directory as an input and finds clean/hazy image
    pairs. A pair consists of '<name>_clean<ext>' and '<name>_hazy<ext>'.
    Images without a partner are skipped.

    Parameters
    ----------
    directory : str
        Path to a directory with one or more image pairs.

    Returns
    -------
    pairs : list
        Tuples of (clean path, hazy path), sorted by name.
    """
    if not os.path.isdir(directory):
        raise ConfigurationError("input directory {} does not exist".format(
            directory))
    found = dict()
    for filename in sorted(os.listdir(directory)):
        stem, extension = os.path.splitext(filename)
        if extension.lower() not in IMAGE_EXTENSIONS:
            continue
        for suffix, role in ((CLEAN_SUFFIX, 0), (HAZY_SUFFIX, 1)):
            if stem.endswith(suffix):
                name = stem[:-len(suffix)]
                found.setdefault(name, ([], []))[role].append(
                    os.path.join(directory, filename))
    duplicates = [name for name, (clean, hazy) in found.items()
                  if len(clean) > 1 or len(hazy) > 1]
    if duplicates:
        for name in sorted(duplicates):
            clean, hazy = found[name]
            report.error("{} files found with the name '{}' (expected 2):"
                         .format(len(clean) + len(hazy), name))
        raise ConfigurationError("ambiguous image pairs in {}".format(
            directory))
    return [(found[name][0][0], found[name][1][0]) for name in sorted(found)
            if found[name][0] and found[name][1]]


def read_pairs(pairs):
    "Read (clean path, hazy path) pairs into (clean, hazy) arrays."
    images = []
    for clean_path, hazy_path in pairs:
        clean = read_image(clean_path)
        hazy = read_image(hazy_path)
        if clean.shape != hazy.shape:
            raise ConfigurationError("'{}' is {} but '{}' is {}".format(
                clean_path, clean.shape, hazy_path, hazy.shape))
        images.append((clean, hazy))
    return images
