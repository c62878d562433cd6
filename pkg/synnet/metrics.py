"""Evaluation metrics: PSNR and the standard three-factor SSIM.

Unlike the loss-side SSIM this one includes the covariance (structure) term
and uses gaussian weighted windows that lie fully inside the image.
"""
import math

import numpy as np

from . import defaults
from .exceptions import ParameterError
from .tensor import Shape4, check_same_shape
from .utils import gaussian_window_matrix


def psnr(pred, target, max_value=defaults.PSNR_MAX):
    """Peak signal-to-noise ratio in dB, ``10 log10(max^2 / MSE)``.

    Returns ``float('inf')`` when the images are identical.
    """
    check_same_shape(pred, target, 'prediction and target')
    if not max_value > 0:
        raise ParameterError("max_value must be positive, got %r" % max_value)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float('inf')
    return 10.0 * math.log10(max_value ** 2 / mse)


def ssim_standard(pred, target, window=defaults.METRIC_SSIM_WINDOW,
                  sigma=defaults.METRIC_SSIM_SIGMA, dynamic_range=defaults.DYNAMIC_RANGE):
    """Mean three-factor SSIM over gaussian windows fully inside the image.

    Parameters
    ----------
    pred, target : numpy.ndarray
        Tensors of equal shape (n, c, h, w); every (n, c) plane is scored.
    window : int
        Side of the gaussian window, at most ``min(h, w)``.
    sigma : float
        Standard deviation of the gaussian window.
    dynamic_range : float
        Value range L; ``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2``.

    Returns
    -------
    float
        Value in [-1, 1]; exactly 1.0 for identical inputs.

    """
    check_same_shape(pred, target, 'prediction and target')
    shape = Shape4.of(pred)
    if window > min(shape.h, shape.w):
        raise ParameterError("ssim window %d larger than image %dx%d" % (window, shape.h, shape.w))
    rows = gaussian_window_matrix(shape.h, window, sigma)
    cols = gaussian_window_matrix(shape.w, window, sigma)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    mx = rows @ x @ cols.T
    my = rows @ y @ cols.T
    vx = rows @ (x * x) @ cols.T - mx * mx
    vy = rows @ (y * y) @ cols.T - my * my
    cov = rows @ (x * y) @ cols.T - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def format_metric(value):
    """Render a metric for CSV output; infinite PSNR prints as ``inf``."""
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return repr(float(value))
