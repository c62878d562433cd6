
import numpy as np
from scipy import ndimage

from . import defaults
from .exceptions import ParameterError


def list_to_str(values, separator=','):
    return separator.join(str(x) for x in values)


def str_to_list(text, separator=','):
    """Split ``text`` on ``separator`` dropping blanks, ``'a, b,'`` -> ``['a', 'b']``."""
    return [x.strip() for x in text.split(separator) if x.strip()]


def parse_size(text):
    """Parse an image size written as ``HxW`` (e.g. ``64x64``).

    Returns
    -------
    tuple of int
        ``(height, width)``.

    """
    parts = text.lower().split('x')
    if len(parts) != 2:
        raise ParameterError("bad size %r, expected HxW" % text)
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParameterError("bad size %r, expected HxW" % text)
    if h < 1 or w < 1:
        raise ParameterError("bad size %r, dimensions must be positive" % text)
    return h, w


def relative_error(a, b, floor=defaults.REL_ERROR_FLOOR):
    """Relative error ``|a - b| / max(floor, |a| + |b|)``.

    Arrays are compared as whole vectors using the euclidean norm, so
    isolated near-zero entries do not dominate the result.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    num = np.linalg.norm(a - b)
    den = max(floor, np.linalg.norm(a) + np.linalg.norm(b))
    return float(num / den)


def box_window_matrix(n, window):
    """Matrix of the 1-D uniform moving average with reflected borders.

    Row ``i`` averages the ``window`` samples centred on ``i``; indices that
    fall outside ``[0, n)`` are mirrored (edge sample not repeated). Applying
    it along both image axes, ``A_h @ x @ A_w.T``, gives the 2-D box mean and
    the transpose gives its adjoint.
    """
    if window % 2 != 1 or window < 1:
        raise ParameterError("window must be a positive odd size, got %d" % window)
    if window > n:
        raise ParameterError("window %d larger than image side %d" % (window, n))
    radius = window // 2
    padded = np.pad(np.arange(n), radius, mode='reflect') if radius else np.arange(n)
    rows = np.repeat(np.arange(n), window)
    cols = padded[np.arange(n)[:, None] + np.arange(window)[None, :]].ravel()
    matrix = np.zeros((n, n))
    np.add.at(matrix, (rows, cols), 1.0 / window)
    return matrix


def gaussian_kernel(window, sigma):
    """Normalized 1-D gaussian taps of odd length ``window``."""
    offsets = np.arange(window) - window // 2
    taps = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


def gaussian_window_matrix(n, window, sigma):
    """Matrix of the 1-D gaussian weighted average over fully inside windows.

    Has ``n - window + 1`` rows, one per valid window position.
    """
    if window > n:
        raise ParameterError("window %d larger than image side %d" % (window, n))
    taps = gaussian_kernel(window, sigma)
    matrix = np.zeros((n - window + 1, n))
    for i in range(n - window + 1):
        matrix[i, i:i + window] = taps
    return matrix


def sobel_magnitude(image):
    """Sobel gradient magnitude of a 2-D image, max-normalized to [0, 1].

    A constant image has no edges and yields all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    gy = ndimage.sobel(image, axis=0, mode='nearest')
    gx = ndimage.sobel(image, axis=1, mode='nearest')
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    if peak <= 0.0:
        return np.zeros_like(magnitude)
    return magnitude / peak


def derive_seed(seed, *keys):
    """Derive a reproducible 32-bit child seed from ``seed`` and integer keys."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1)[0])
