"""Cost-function terms with analytic gradients w.r.t. the prediction.

Image terms are normalized by ``N * P`` (batch size times pixels per image)
so the relative weights do not depend on the image size. The SSIM used here
is the two-factor luminance x contrast form; evaluation uses the standard
three-factor SSIM from ``synnet.metrics``.
"""
import collections

import numpy as np

from . import defaults
from .exceptions import ParameterError, ShapeError
from .tensor import Shape4, check_same_shape
from .utils import box_window_matrix, sobel_magnitude


class SsimConfig(object):
    """Statistics used by the loss-side SSIM.

    Parameters
    ----------
    mode : str
        ``local``: per-pixel map over uniform sliding windows with reflected
        borders. ``global``: one mean/deviation pair per image.
    window : int
        Odd window size of the local mode.
    dynamic_range : float
        Value range L of the images; ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``.

    """

    def __init__(self, mode=defaults.SSIM_MODE, window=defaults.SSIM_WINDOW,
                 dynamic_range=defaults.DYNAMIC_RANGE, c1=None, c2=None):
        if mode not in defaults.SSIM_MODES:
            raise ParameterError("unknown ssim mode %r" % mode)
        if window < 1 or window % 2 != 1:
            raise ParameterError("ssim window must be odd, got %d" % window)
        if not dynamic_range > 0:
            raise ParameterError("dynamic range must be positive")
        self.mode = mode
        self.window = int(window)
        self.dynamic_range = float(dynamic_range)
        self.c1 = (0.01 * dynamic_range) ** 2 if c1 is None else float(c1)
        self.c2 = (0.03 * dynamic_range) ** 2 if c2 is None else float(c2)
        if not (self.c1 > 0 and self.c2 > 0):
            raise ParameterError("C1 and C2 must be positive")

    @classmethod
    def from_config(cls, cfg):
        return cls(mode=cfg.ssim_mode, window=cfg.ssim_window, dynamic_range=cfg.dynamic_range)


class LossWeights(collections.namedtuple('LossWeights', 'l1 l2 l3 l4')):
    """Relative weights of weighted L2, weighted SSIM, TV and weight decay."""

    __slots__ = ()

    def __new__(cls, l1=defaults.LAMBDA1, l2=defaults.LAMBDA2,
                l3=defaults.LAMBDA3, l4=defaults.LAMBDA4):
        values = tuple(float(v) for v in (l1, l2, l3, l4))
        if any(v < 0 for v in values):
            raise ParameterError("loss weights must be non-negative, got %s" % (values,))
        return super(LossWeights, cls).__new__(cls, *values)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4).for_loss(cfg.loss)

    def for_loss(self, kind):
        """Weights actually applied by a loss selection.

        ``l2`` and ``weighted_l2`` train on the L2 term (plus weight decay);
        ``joint`` keeps every term.
        """
        if kind not in defaults.LOSSES:
            raise ParameterError("unknown loss %r" % kind)
        if kind == 'joint':
            return self
        return self._replace(l2=0.0, l3=0.0)


def uses_edge_weights(kind):
    return kind in ('weighted_l2', 'joint')


class LossReport(object):
    """Per-term values, their weighted total and the gradients of one batch.

    ``grads`` holds one tensor per synthesis head (gradient of ``total``
    w.r.t. that prediction). ``wd_grads`` is the raw ``dR_W / dTheta``; the
    optimizer scales it by ``weights.l4``.
    """

    def __init__(self, l2_term, ssim_term, tv_term, wd_term, weights, grads, wd_grads):
        self.l2_term = l2_term
        self.ssim_term = ssim_term
        self.tv_term = tv_term
        self.wd_term = wd_term
        self.weights = weights
        self.grads = grads
        self.wd_grads = wd_grads
        self.total = (weights.l1 * l2_term + weights.l2 * ssim_term
                      + weights.l3 * tv_term + weights.l4 * wd_term)

    def terms(self):
        return (self.l2_term, self.ssim_term, self.tv_term, self.wd_term, self.total)


def _weights_or_ones(pred, weights):
    if weights is None:
        return np.ones(pred.shape, dtype=np.float64)
    check_same_shape(pred, weights, 'prediction and weight map')
    if np.any(weights < 0):
        raise ParameterError("weight map has negative entries")
    return weights


def l2_loss(pred, target, weights=None):
    """Weighted mean squared error and its gradient w.r.t. ``pred``.

    ``loss = sum(w * (pred - target)^2) / (N * P)`` with ``w = 1`` when no map is given.
    """
    check_same_shape(pred, target, 'prediction and target')
    shape = Shape4.of(pred)
    w = _weights_or_ones(pred, weights)
    norm = float(shape.n * shape.c * shape.h * shape.w)
    diff = pred.astype(np.float64) - target
    loss = float(np.sum(w * diff * diff) / norm)
    grad = (2.0 / norm) * w * diff
    return loss, grad.astype(pred.dtype)


def edge_weight_map(target, beta=defaults.EDGE_BETA):
    """Per-pixel loss weights ``1 + beta * E`` from the target's max-normalized Sobel magnitude."""
    if beta < 0:
        raise ParameterError("edge beta must be non-negative, got %r" % beta)
    shape = Shape4.of(target)
    weights = np.ones(target.shape, dtype=np.float64)
    if beta == 0:
        return weights.astype(target.dtype)
    for n in range(shape.n):
        for c in range(shape.c):
            weights[n, c] += beta * sobel_magnitude(target[n, c])
    return weights.astype(target.dtype)


class _WindowStats(object):
    """Mean operator of the SSIM statistics and its adjoint."""

    def __init__(self, shape, cfg):
        self.mode = cfg.mode
        self.pixels = shape.h * shape.w
        if self.mode == 'local':
            if cfg.window > min(shape.h, shape.w):
                raise ParameterError("ssim window %d larger than image %dx%d"
                                     % (cfg.window, shape.h, shape.w))
            self.rows = box_window_matrix(shape.h, cfg.window)
            self.cols = box_window_matrix(shape.w, cfg.window)

    def mean(self, x):
        if self.mode == 'global':
            return np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape)
        return self.rows @ x @ self.cols.T

    def adjoint(self, g):
        if self.mode == 'global':
            return np.broadcast_to(g.sum(axis=(2, 3), keepdims=True) / self.pixels, g.shape)
        return self.rows.T @ g @ self.cols


def _ssim_terms(pred, target, cfg):
    check_same_shape(pred, target, 'prediction and target')
    stats = _WindowStats(Shape4.of(pred), cfg)
    x = pred.astype(np.float64)
    y = target.astype(np.float64)
    mx, my = stats.mean(x), stats.mean(y)
    vx = stats.mean(x * x) - mx * mx
    vy = stats.mean(y * y) - my * my
    sx = np.sqrt(np.maximum(vx, 0.0) + defaults.SSIM_SIGMA_EPS)
    sy = np.sqrt(np.maximum(vy, 0.0) + defaults.SSIM_SIGMA_EPS)
    l_den = mx * mx + my * my + cfg.c1
    c_den = sx * sx + sy * sy + cfg.c2
    lum = (2.0 * mx * my + cfg.c1) / l_den
    con = (2.0 * sx * sy + cfg.c2) / c_den
    return dict(stats=stats, x=x, mx=mx, my=my, vx=vx, sx=sx, sy=sy,
                l_den=l_den, c_den=c_den, lum=lum, con=con)


def ssim_map(pred, target, cfg=None):
    """Two-factor SSIM (luminance x contrast), one value per pixel.

    In global mode every pixel of an image carries that image's single value.
    """
    t = _ssim_terms(pred, target, cfg or SsimConfig())
    return t['lum'] * t['con']


def ssim_loss(pred, target, cfg=None, weights=None):
    """Weighted SSIM loss ``sum(w * (1 - Q)) / (N * P)`` and its gradient w.r.t. ``pred``.

    The gradient applies the product rule to ``Q = l * c`` and chains it
    through the window means and variances.
    """
    cfg = cfg or SsimConfig()
    t = _ssim_terms(pred, target, cfg)
    shape = Shape4.of(pred)
    w = _weights_or_ones(pred, weights)
    norm = float(shape.n * shape.c * shape.h * shape.w)
    q = t['lum'] * t['con']
    loss = float(np.sum(w * (1.0 - q)) / norm)

    g_q = -w / norm
    d_lum = 2.0 * (t['my'] - t['lum'] * t['mx']) / t['l_den']
    d_con = 2.0 * (t['sy'] - t['con'] * t['sx']) / t['c_den']
    g_mean = g_q * t['con'] * d_lum
    g_var = np.where(t['vx'] > 0, g_q * t['lum'] * d_con / (2.0 * t['sx']), 0.0)
    g_mean = g_mean - 2.0 * t['mx'] * g_var
    stats = t['stats']
    grad = stats.adjoint(g_mean) + 2.0 * t['x'] * stats.adjoint(g_var)
    return loss, grad.astype(pred.dtype)


def tv_loss(pred, eps=defaults.TV_EPS):
    """Smoothed total variation ``sum(sqrt(p^2 + q^2 + eps)) / N`` and its gradient.

    ``p`` and ``q`` are one-sided forward differences down and right; the last
    row and column have no valid cell.
    """
    if eps < 0:
        raise ParameterError("tv eps must be non-negative, got %r" % eps)
    shape = Shape4.of(pred)
    x = pred.astype(np.float64)
    base = x[:, :, :-1, :-1]
    p = x[:, :, 1:, :-1] - base
    q = x[:, :, :-1, 1:] - base
    t = np.sqrt(p * p + q * q + eps)
    loss = float(t.sum() / shape.n)

    safe = np.where(t > 0, t, 1.0)
    dp = np.where(t > 0, p / safe, 0.0) / shape.n
    dq = np.where(t > 0, q / safe, 0.0) / shape.n
    grad = np.zeros_like(x)
    grad[:, :, 1:, :-1] += dp
    grad[:, :, :-1, 1:] += dq
    grad[:, :, :-1, :-1] -= dp + dq
    return loss, grad.astype(pred.dtype)


def weight_decay(params):
    """``R_W = 0.5 * sum(w^2)`` over convolution weights only; gradient ``w``.

    Biases and batch-norm parameters do not contribute.
    """
    total = 0.0
    grads = collections.OrderedDict()
    for name in params.conv_weight_names():
        w = params[name]
        total += 0.5 * float(np.sum(w.astype(np.float64) ** 2))
        grads[name] = w.copy()
    return total, grads


def joint_loss(preds, targets, params, weights, cfg=None, maps=None, tv_eps=defaults.TV_EPS):
    """Weighted combination of L2, SSIM, TV and weight decay for one batch.

    With several synthesis heads each image term is averaged over heads.
    ``maps`` is ``None`` (unweighted) or one weight map per head.

    Returns
    -------
    LossReport

    """
    if len(preds) != len(targets):
        raise ShapeError("%d predictions for %d targets" % (len(preds), len(targets)))
    if maps is not None and len(maps) != len(preds):
        raise ShapeError("%d weight maps for %d predictions" % (len(maps), len(preds)))
    cfg = cfg or SsimConfig()
    heads = float(len(preds))
    l2_term = ssim_term = tv_term = 0.0
    grads = []
    for k, (pred, target) in enumerate(zip(preds, targets)):
        w = None if maps is None else maps[k]
        l2_value, l2_grad = l2_loss(pred, target, w)
        ssim_value, ssim_grad = ssim_loss(pred, target, cfg, w)
        tv_value, tv_grad = tv_loss(pred, tv_eps)
        l2_term += l2_value / heads
        ssim_term += ssim_value / heads
        tv_term += tv_value / heads
        grad = (weights.l1 * l2_grad.astype(np.float64)
                + weights.l2 * ssim_grad.astype(np.float64)
                + weights.l3 * tv_grad.astype(np.float64)) / heads
        grads.append(grad.astype(pred.dtype))
    wd_term, wd_grads = weight_decay(params)
    return LossReport(l2_term, ssim_term, tv_term, wd_term, weights, grads, wd_grads)
