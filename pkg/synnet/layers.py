"""Forward and backward passes of the layer primitives.

Every forward returns its output together with a ``LayerTape`` holding what
the matching backward needs. Functions are pure: parameters are never
modified in place (batch-norm hands updated running statistics back through
its tape instead).
"""
import collections

import numpy as np

from . import defaults
from .exceptions import DegenerateStatisticsError, ShapeError, UsageError
from .tensor import Shape4

TRAIN = 'train'
INFER = 'infer'

ConvParams = collections.namedtuple('ConvParams', 'weight bias')


class BatchNormParams(object):
    """Per-channel scale/shift plus running statistics of one batch-norm layer.

    Parameters
    ----------
    gamma, beta : numpy.ndarray
        Learnable scale and shift, one entry per channel.
    running_mean, running_var : numpy.ndarray
        Inference statistics, one entry per channel.
    eps : float
        Variance stabilizer.
    momentum : float
        Running-average factor: ``running <- momentum * running + (1 - momentum) * batch``.

    """

    def __init__(self, gamma, beta, running_mean, running_var,
                 eps=defaults.BN_EPS, momentum=defaults.BN_MOMENTUM):
        sizes = set(len(v) for v in (gamma, beta, running_mean, running_var))
        if len(sizes) != 1:
            raise ShapeError("batch-norm vectors differ in length: %s" % sorted(sizes))
        if np.any(running_var < 0):
            raise ShapeError("running variance must be non-negative")
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self):
        return len(self.gamma)


class PoolIndices(object):
    """Argmax offsets (0..3, row-major inside each 2x2 window) of a max-pool."""

    def __init__(self, offsets):
        self.offsets = offsets

    @property
    def shape(self):
        return self.offsets.shape

    def __eq__(self, other):
        return isinstance(other, PoolIndices) and np.array_equal(self.offsets, other.offsets)

    def __ne__(self, other):
        return not self == other


class LayerTape(object):
    """Values cached by a forward pass for the matching backward pass."""

    def __init__(self, kind, **cached):
        self.kind = kind
        self.__dict__.update(cached)

    def expect(self, kind):
        if self.kind != kind:
            raise UsageError("%s backward called with a %s tape" % (kind, self.kind))


def _pad_spatial(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, p):
    """Same-padded 2-D cross-correlation with bias.

    Parameters
    ----------
    x : numpy.ndarray
        Input of shape (n, in_c, h, w).
    p : ConvParams
        Weights of shape (out_c, in_c, k, k) with k in {1, 3}, bias of shape (out_c,).

    Returns
    -------
    (numpy.ndarray, LayerTape)
        Output of shape (n, out_c, h, w) and the tape for ``conv2d_backward``.

    """
    shape = Shape4.of(x)
    out_c, in_c, kh, kw = p.weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError("kernel must be 1x1 or 3x3, got %dx%d" % (kh, kw))
    if shape.c != in_c:
        raise ShapeError("input has %d channels, kernel expects %d" % (shape.c, in_c))
    if p.bias.shape != (out_c,):
        raise ShapeError("bias shape %s does not match %d output channels"
                         % (p.bias.shape, out_c))
    xp = _pad_spatial(x, kh // 2)
    out = np.zeros((shape.n, out_c, shape.h, shape.w), dtype=x.dtype)
    # One channel-mixing product per kernel tap, summed in fixed tap order.
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + shape.h, j:j + shape.w]
            out += np.tensordot(patch, p.weight[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    out += p.bias[None, :, None, None]
    return out, LayerTape('conv', x=x, weight=p.weight)


def conv2d_backward(tape, grad_out):
    """Gradients of ``conv2d_forward`` w.r.t. its input, weights and bias."""
    tape.expect('conv')
    x, weight = tape.x, tape.weight
    n, _, h, w = x.shape
    k = weight.shape[2]
    expected = (n, weight.shape[0], h, w)
    if grad_out.shape != expected:
        raise ShapeError("grad shape %s, forward output was %s" % (grad_out.shape, expected))
    xp = _pad_spatial(x, k // 2)
    grad_xp = np.zeros_like(xp)
    grad_weight = np.zeros_like(weight)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + h, j:j + w]
            grad_weight[:, :, i, j] = np.tensordot(grad_out, patch, axes=([0, 2, 3], [0, 2, 3]))
            grad_xp[:, :, i:i + h, j:j + w] += np.tensordot(
                grad_out, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    pad = k // 2
    grad_in = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_in), ConvParams(grad_weight, grad_bias)


def batchnorm_forward(x, p, mode=TRAIN):
    """Per-channel batch normalization.

    In train mode the batch mean and biased variance over (n, h, w) are used
    and the tape carries the updated running statistics
    (``tape.running_mean``, ``tape.running_var``). In infer mode the running
    statistics are used and the tape records nothing reusable.
    """
    shape = Shape4.of(x)
    if shape.c != p.channels:
        raise ShapeError("input has %d channels, batch-norm has %d" % (shape.c, p.channels))
    gamma = p.gamma[None, :, None, None]
    beta = p.beta[None, :, None, None]
    if mode == INFER:
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * xhat + beta, LayerTape('batchnorm', mode=INFER)
    if mode != TRAIN:
        raise UsageError("unknown mode %r" % mode)

    count = shape.n * shape.h * shape.w
    if count == 1:
        raise DegenerateStatisticsError(
            "batch statistics need more than one value per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    tape = LayerTape(
        'batchnorm',
        mode=TRAIN,
        xhat=xhat,
        inv_std=inv_std,
        gamma=p.gamma,
        count=count,
        running_mean=p.momentum * p.running_mean + (1.0 - p.momentum) * mean,
        running_var=p.momentum * p.running_var + (1.0 - p.momentum) * var,
    )
    return gamma * xhat + beta, tape


def batchnorm_backward(tape, grad_out):
    """Full batch-norm backward, gradients through the batch mean and variance included.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray, numpy.ndarray)
        ``grad_in``, ``grad_gamma``, ``grad_beta``.

    """
    tape.expect('batchnorm')
    if tape.mode != TRAIN:
        raise UsageError("batch-norm backward needs a train-mode tape")
    xhat = tape.xhat
    if grad_out.shape != xhat.shape:
        raise ShapeError("grad shape %s, forward output was %s" % (grad_out.shape, xhat.shape))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_xhat = grad_out * tape.gamma[None, :, None, None]
    sum_g = grad_xhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_gx = (grad_xhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    scale = (tape.inv_std / tape.count)[None, :, None, None]
    grad_in = scale * (tape.count * grad_xhat - sum_g - xhat * sum_gx)
    return grad_in, grad_gamma, grad_beta


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), LayerTape('relu', mask=mask)


def relu_backward(tape, grad_out):
    """Pass gradients where the input was positive; the subgradient at 0 is 0."""
    tape.expect('relu')
    if grad_out.shape != tape.mask.shape:
        raise ShapeError("grad shape %s, forward output was %s"
                         % (grad_out.shape, tape.mask.shape))
    return np.where(tape.mask, grad_out, 0).astype(grad_out.dtype)


def _blocks(x):
    # (n, c, 2h, 2w) -> (n, c, h, w, 4), window cells in row-major order
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, h // 2, w // 2, 4)


def _unblocks(blocks):
    n, c, h, w, _ = blocks.shape
    x = blocks.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(x.reshape(n, c, 2 * h, 2 * w))


def _scatter(values, offsets):
    blocks = np.zeros(values.shape + (4,), dtype=values.dtype)
    np.put_along_axis(blocks, offsets[..., None].astype(np.intp), values[..., None], axis=-1)
    return _unblocks(blocks)


def _gather(x, offsets):
    picked = np.take_along_axis(_blocks(x), offsets[..., None].astype(np.intp), axis=-1)
    return np.ascontiguousarray(picked[..., 0])


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max-pool with stride 2 that keeps its argmax offsets.

    Ties go to the first maximum in row-major window order.

    Returns
    -------
    (numpy.ndarray, PoolIndices, LayerTape)

    """
    shape = Shape4.of(x)
    if shape.h % 2 or shape.w % 2:
        raise ShapeError("max-pool needs even height and width, got %dx%d" % (shape.h, shape.w))
    offsets = _blocks(x).argmax(axis=-1).astype(np.int8)
    idx = PoolIndices(offsets)
    pooled = _gather(x, offsets)
    return pooled, idx, LayerTape('maxpool', idx=idx)


def maxpool2x2_backward(tape, grad_out):
    """Route each pooled gradient to its argmax position, zero elsewhere."""
    tape.expect('maxpool')
    if grad_out.shape != tape.idx.shape:
        raise ShapeError("grad shape %s, pooled output was %s" % (grad_out.shape, tape.idx.shape))
    return _scatter(grad_out, tape.idx.offsets)


def unpool2x2_forward(v, idx):
    """Place every value at its recorded argmax inside a doubled grid; zeros elsewhere."""
    Shape4.of(v)
    if v.shape != idx.shape:
        raise ShapeError("values %s do not match pool indices %s" % (v.shape, idx.shape))
    return _scatter(v, idx.offsets), LayerTape('unpool', idx=idx)


def unpool2x2_backward(tape, grad_out):
    """Gather gradients back from the recorded positions (adjoint of the scatter)."""
    tape.expect('unpool')
    n, c, h, w = tape.idx.shape
    if grad_out.shape != (n, c, 2 * h, 2 * w):
        raise ShapeError("grad shape %s, unpooled output was %s"
                         % (grad_out.shape, (n, c, 2 * h, 2 * w)))
    return _gather(grad_out, tape.idx.offsets)


def linear_activation(x):
    """Identity activation of the synthesis head."""
    return x


def linear_activation_backward(grad_out):
    return grad_out
