"""
Synthetic hazy/clean image pairs from procedural scenes and the atmospheric
scattering model hazy = clean * t + A * (1 - t).
"""

from __future__ import absolute_import
from __future__ import division
import os
from functools import partial
from multiprocessing import Pool
from multiprocessing import cpu_count

import numpy as np

from . import imageio
from . import report
from .errors import ConfigurationError

# scattering coefficient range for depth-derived transmission
BETA_RANGE = (0.6, 1.8)
ATMOSPHERE_RANGE = (0.7, 1.0)


class HazeParams(object):
    """
    Parameters of the atmospheric scattering model.

    Parameters
    ----------
    transmission : float or numpy.ndarray
        t in (0, 1], either a scalar or an (h, w) map.

    atmosphere : tuple
        Global atmospheric light A, one value in [0, 1] per channel.
    """
    def __init__(self, transmission, atmosphere=(1.0, 1.0, 1.0)):
        transmission = np.asarray(transmission, dtype=np.float64)
        atmosphere = np.asarray(atmosphere, dtype=np.float64).reshape(-1)
        if transmission.size == 0 or np.min(transmission) <= 0 or \
           np.max(transmission) > 1:
            raise ConfigurationError("transmission has to lie in (0, 1]")
        if atmosphere.shape != (3,) or np.min(atmosphere) < 0 or \
           np.max(atmosphere) > 1:
            raise ConfigurationError("atmospheric light needs three values "
                                     "in [0, 1], got {}".format(atmosphere))
        self._transmission = transmission
        self._atmosphere = atmosphere

    @property
    def transmission(self):
        return self._transmission

    @property
    def atmosphere(self):
        return self._atmosphere


def apply_haze(clean, params):
    "Returns clean * t + A * (1 - t), clipped to [0, 1]."
    clean = np.asarray(clean, dtype=np.float64)
    transmission = params.transmission
    if transmission.ndim == 2:
        if transmission.shape != clean.shape[-2:]:
            raise ConfigurationError(
                "transmission map {} does not fit an image {}".format(
                    transmission.shape, clean.shape))
        transmission = transmission[None]
    atmosphere = params.atmosphere.reshape(3, 1, 1)
    return np.clip(clean * transmission + atmosphere * (1 - transmission),
                   0, 1)


def render_scene(rng, size=64):
    """Render a procedural scene and a depth proxy.

    The scene is a colour gradient with a few rectangles and discs, each
    carrying a sinusoidal texture; every shape sits at its own depth in front
    of a background that recedes towards the top of the image.

    Returns
    -------
    scene : tuple
        (image of shape (3, size, size) in [0, 1], depth of shape
        (size, size) in [0, 1])
    """
    rows, cols = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    start, end = rng.uniform(0.1, 0.9, (2, 3, 1, 1))
    angle = rng.uniform(0, np.pi)
    ramp = np.cos(angle) * rows + np.sin(angle) * cols
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    image = start + (end - start) * ramp[None]
    depth = 0.6 + 0.4 * (1 - rows)
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, (3, 1, 1))
        center = rng.uniform(0, 1, 2)
        extent = rng.uniform(0.08, 0.3, 2)
        if rng.uniform() < 0.5:
            mask = (np.abs(rows - center[0]) < extent[0]) & \
                (np.abs(cols - center[1]) < extent[1])
        else:
            mask = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 < \
                extent[0] ** 2
        frequency = rng.uniform(4, 16)
        phase = rng.uniform(0, 2 * np.pi)
        texture = 0.15 * np.sin(frequency * np.pi * (rows + cols) + phase)
        shape = np.clip(color + texture[None], 0, 1)
        image = np.where(mask[None], shape, image)
        depth = np.where(mask, rng.uniform(0.05, 0.6), depth)
    return np.clip(image, 0, 1), depth


def random_haze(rng, depth, transmission=None):
    """Haze parameters for a scene. Without a fixed transmission, t is
    exp(-beta * depth) for a random scattering coefficient beta."""
    atmosphere = rng.uniform(ATMOSPHERE_RANGE[0], ATMOSPHERE_RANGE[1], 3)
    if transmission is None:
        beta = rng.uniform(*BETA_RANGE)
        transmission = np.exp(-beta * depth)
    return HazeParams(transmission, atmosphere)


def generate_pair(seed, size=64, transmission=None):
    """Render one (clean, hazy) pair from a seed, an int or a
    numpy.random.SeedSequence."""
    rng = np.random.default_rng(seed)
    clean, depth = render_scene(rng, size)
    hazy = apply_haze(clean, random_haze(rng, depth, transmission))
    return clean, hazy


def _seeds(count, seed):
    return np.random.SeedSequence(seed).spawn(count)


def synthesize_pairs(count, size=64, seed=0, transmission=None):
    "Returns count (clean, hazy) pairs; the same seed gives the same pairs."
    return [generate_pair(child, size, transmission)
            for child in _seeds(count, seed)]


def _write_pair(job, directory, size, transmission):
    index, seed = job
    clean, hazy = generate_pair(seed, size, transmission)
    name = os.path.join(directory, "{:04d}".format(index))
    clean_path = name + imageio.CLEAN_SUFFIX + ".ppm"
    hazy_path = name + imageio.HAZY_SUFFIX + ".ppm"
    imageio.write_ppm(clean_path, clean)
    imageio.write_ppm(hazy_path, hazy)
    return clean_path, hazy_path


def synthesize_dataset(directory, count, size=64, seed=0, threads=1,
                       transmission=None, display=False):
    """Write count pairs as '<index>_clean.ppm' and '<index>_hazy.ppm' to
    directory, rendering them on up to threads processes.

    Returns
    -------
    pairs : list
        Tuples of (clean path, hazy path), in index order.
    """
    if count < 1:
        raise ConfigurationError("the number of pairs has to be positive")
    if not os.path.isdir(directory):
        os.makedirs(directory)
    jobs = list(enumerate(_seeds(count, seed)))
    write = partial(_write_pair, directory=directory, size=size,
                    transmission=transmission)
    threads = max(1, min(threads, cpu_count()))
    pairs = []
    if threads == 1:
        results = map(write, jobs)
    else:
        pool = Pool(processes=threads)
        results = pool.imap_unordered(write, jobs)
    try:
        for index, pair in enumerate(results, 1):
            if display:
                report.progress_bar("rendering image pairs ({}/{})".format(
                    index, count))
            pairs.append(pair)
    finally:
        if threads > 1:
            pool.terminate()
    if display:
        report.progress_bar("rendered {} image pairs".format(count),
                            replace=False)
    return sorted(pairs)
