"Image quality metrics for (3, h, w) images in [0, 1]."

from __future__ import absolute_import
from __future__ import division

import numpy as np
from skimage.metrics import structural_similarity

from .errors import DimensionError

# reported instead of infinity for identical images
PSNR_CAP = 100.0
# side of the Gaussian SSIM window, 2 * int(3.5 * 1.5 + 0.5) + 1
SSIM_WINDOW = 11


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("cannot compare images of shape {} and {}"
                             .format(a.shape, b.shape))
    return a, b


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio 10 log10(range^2 / MSE) in dB. Identical
    images give PSNR_CAP."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(data_range ** 2 / mse)))


def ssim(a, b, data_range=1.0):
    """Structural similarity with an 11 x 11 Gaussian window (sigma 1.5) and
    the usual stabilizers, averaged over channels. Both sides of the images
    have to be at least SSIM_WINDOW pixels long."""
    a, b = _pair(a, b)
    if a.ndim not in (2, 3) or min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError("SSIM needs (h, w) or (c, h, w) images with "
                             "sides of at least {} pixels, got {}".format(
                                 SSIM_WINDOW, a.shape))
    if a.ndim == 2:
        return float(structural_similarity(
            a, b, data_range=data_range, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False))
    return float(structural_similarity(
        a, b, data_range=data_range, channel_axis=0, gaussian_weights=True,
        sigma=1.5, use_sample_covariance=False))
