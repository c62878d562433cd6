"""Brute-force oracles and the finite-difference gradient checks.

Layer and loss functions are looked up through their modules at call time,
so a check exercises whatever implementation is currently installed.
"""
import collections
import functools
import itertools
import logging
import math

import numpy as np

from . import defaults, layers, loss, model
from .exceptions import ParameterError, SynNetError
from .tensor import RngStream, Shape4
from .utils import derive_seed, gaussian_kernel, relative_error

logger = logging.getLogger(__name__)

MAX_DRAWS = 100


def conv_oracle(x, p):
    """Direct same-padded cross-correlation, one output element at a time."""
    shape = Shape4.of(x)
    out_c, in_c, k, _ = p.weight.shape
    if shape.c != in_c:
        raise ParameterError("input has %d channels, kernel expects %d" % (shape.c, in_c))
    pad = k // 2
    xp = np.zeros((shape.n, in_c, shape.h + 2 * pad, shape.w + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + shape.h, pad:pad + shape.w] = x
    out = np.zeros((shape.n, out_c, shape.h, shape.w), dtype=np.float64)
    for n in range(shape.n):
        for o in range(out_c):
            for i in range(shape.h):
                for j in range(shape.w):
                    acc = float(p.bias[o])
                    for c in range(in_c):
                        for di in range(k):
                            for dj in range(k):
                                acc += float(p.weight[o, c, di, dj]) * xp[n, c, i + di, j + dj]
                    out[n, o, i, j] = acc
    return out.astype(x.dtype)


def maxpool_oracle(x):
    """2x2 max-pool by scanning each window in row-major order; first maximum wins."""
    shape = Shape4.of(x)
    pooled = np.zeros((shape.n, shape.c, shape.h // 2, shape.w // 2), dtype=x.dtype)
    offsets = np.zeros(pooled.shape, dtype=np.int8)
    for n, c, i, j in itertools.product(*(range(d) for d in pooled.shape)):
        best, where = None, 0
        for offset in range(4):
            v = x[n, c, 2 * i + offset // 2, 2 * j + offset % 2]
            if best is None or v > best:
                best, where = v, offset
        pooled[n, c, i, j] = best
        offsets[n, c, i, j] = where
    return pooled, offsets


def ssim_oracle(pred, target, window=defaults.METRIC_SSIM_WINDOW, sigma=defaults.METRIC_SSIM_SIGMA,
                dynamic_range=defaults.DYNAMIC_RANGE):
    """Three-factor gaussian SSIM evaluated window by window."""
    shape = Shape4.of(pred)
    taps = gaussian_kernel(window, sigma)
    weights = np.outer(taps, taps)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    values = []
    for n, c in itertools.product(range(shape.n), range(shape.c)):
        for i in range(shape.h - window + 1):
            for j in range(shape.w - window + 1):
                a = np.asarray(pred[n, c, i:i + window, j:j + window], dtype=np.float64)
                b = np.asarray(target[n, c, i:i + window, j:j + window], dtype=np.float64)
                ma, mb = np.sum(weights * a), np.sum(weights * b)
                va = np.sum(weights * a * a) - ma * ma
                vb = np.sum(weights * b * b) - mb * mb
                cov = np.sum(weights * a * b) - ma * mb
                values.append((2 * ma * mb + c1) * (2 * cov + c2)
                              / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(values))


def finite_diff(f, x, h=defaults.FD_STEP):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``f`` is called with a double-precision working copy that is perturbed
    one element at a time.
    """
    if not h > 0:
        raise ParameterError("step must be positive, got %r" % h)
    work = np.array(x, dtype=np.float64)
    grad = np.zeros_like(work)
    for index in np.ndindex(*work.shape):
        original = work[index]
        work[index] = original + h
        plus = f(work)
        work[index] = original - h
        minus = f(work)
        work[index] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise ParameterError("objective is not finite at element %s" % (index,))
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


GradCheck = collections.namedtuple('GradCheck', 'name rel_error tolerance passed note', defaults=('',))


class GradcheckReport(object):

    def __init__(self, checks=None):
        self.checks = list(checks or [])

    def add(self, name, analytic, numeric, tolerance):
        error = relative_error(analytic, numeric)
        check = GradCheck(name, error, tolerance, bool(error <= tolerance))
        self.checks.append(check)
        logger.debug("%s: relative error %.3e (tolerance %.0e)", name, error, tolerance)
        return check

    def fail(self, name, reason):
        """Record a check that could not be evaluated."""
        check = GradCheck(name, math.inf, 0.0, False, reason)
        self.checks.append(check)
        logger.warning("%s: check aborted: %s", name, reason)
        return check

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def max_error(self):
        return max(c.rel_error for c in self.checks) if self.checks else 0.0

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def format(self):
        lines = [('%-4s %-28s rel_error=%.3e tol=%.0e'
                  % ('ok' if c.passed else 'FAIL', c.name, c.rel_error, c.tolerance)
                  + ('  (%s)' % c.note if c.note else ''))
                 for c in self.checks]
        lines.append('%d/%d checks passed' % (len(self.checks) - len(self.failures()), len(self.checks)))
        return '\n'.join(lines)


def _draw(name, seed, key, make, accept):
    """Rejection sampling: redraw until ``accept`` holds, at most MAX_DRAWS times."""
    for attempt in range(MAX_DRAWS):
        value = make(RngStream(derive_seed(seed, key, attempt)))
        if accept(value):
            return value
    logger.warning("%s: no draw accepted after %d attempts, using the last one", name, MAX_DRAWS)
    return value


def _window_gaps(x):
    # gap between the largest and second largest entry of every 2x2 window
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    ordered = np.sort(blocks, axis=-1)
    return ordered[..., 3], ordered[..., 3] - ordered[..., 2]


def _project(fn, r):
    return lambda v: float(np.sum(fn(v) * r))


def _check_conv(report, seed, k, key):
    rng = RngStream(derive_seed(seed, key))
    x = rng.uniform(-1, 1, (2, 3, 5, 6))
    p = layers.ConvParams(rng.uniform(-1, 1, (4, 3, k, k)), rng.uniform(-1, 1, 4))
    out, tape = layers.conv2d_forward(x, p)
    r = rng.uniform(-1, 1, out.shape)
    grad_x, grad_p = layers.conv2d_backward(tape, r)
    label = 'conv%dx%d' % (k, k)
    report.add(label + '.input', grad_x,
               finite_diff(_project(lambda v: layers.conv2d_forward(v, p)[0], r), x),
               defaults.TOL_LAYER)
    report.add(label + '.weight', grad_p.weight,
               finite_diff(_project(lambda v: layers.conv2d_forward(x, layers.ConvParams(v, p.bias))[0], r),
                           p.weight),
               defaults.TOL_LAYER)
    report.add(label + '.bias', grad_p.bias,
               finite_diff(_project(lambda v: layers.conv2d_forward(x, layers.ConvParams(p.weight, v))[0], r),
                           p.bias),
               defaults.TOL_LAYER)


def _check_conv_oracle(report, seed):
    rng = RngStream(derive_seed(seed, 2))
    x = rng.uniform(-1, 1, (2, 2, 5, 4))
    p = layers.ConvParams(rng.uniform(-1, 1, (3, 2, 3, 3)), rng.uniform(-1, 1, 3))
    report.add('conv3x3.oracle', layers.conv2d_forward(x, p)[0], conv_oracle(x, p), defaults.TOL_ORACLE)


def _check_batchnorm(report, seed):
    rng = RngStream(derive_seed(seed, 3))
    x = rng.uniform(-1, 1, (3, 2, 4, 4))
    c = x.shape[1]

    def bn(gamma, beta):
        return layers.BatchNormParams(gamma, beta, np.zeros(c), np.ones(c))

    gamma, beta = rng.uniform(0.5, 1.5, c), rng.uniform(-0.5, 0.5, c)
    out, tape = layers.batchnorm_forward(x, bn(gamma, beta), layers.TRAIN)
    r = rng.uniform(-1, 1, out.shape)
    grad_x, grad_gamma, grad_beta = layers.batchnorm_backward(tape, r)
    report.add('batchnorm.input', grad_x,
               finite_diff(_project(lambda v: layers.batchnorm_forward(v, bn(gamma, beta))[0], r), x),
               defaults.TOL_LAYER)
    report.add('batchnorm.gamma_beta', np.concatenate([grad_gamma, grad_beta]),
               np.concatenate([
                   finite_diff(_project(lambda v: layers.batchnorm_forward(x, bn(v, beta))[0], r), gamma),
                   finite_diff(_project(lambda v: layers.batchnorm_forward(x, bn(gamma, v))[0], r), beta),
               ]),
               defaults.TOL_LAYER)


def _signed_magnitudes(rng, shape=(2, 3, 4, 4)):
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(0.1, 1.0, shape)


def _check_relu(report, seed):
    # Inputs stay at least 0.1 away from the kink at zero.
    x = _draw('relu', seed, 4, _signed_magnitudes, lambda v: np.min(np.abs(v)) >= 0.1)
    rng = RngStream(derive_seed(seed, 4, MAX_DRAWS))
    out, tape = layers.relu_forward(x)
    r = rng.uniform(-1, 1, out.shape)
    report.add('relu', layers.relu_backward(tape, r),
               finite_diff(_project(lambda v: layers.relu_forward(v)[0], r), x), defaults.TOL_RELU)


def _check_pooling(report, seed):
    # Every window's maximum leads the runner-up by at least 1e-3 (no ties).
    x = _draw('maxpool', seed, 5, lambda rng: rng.uniform(-1, 1, (2, 2, 6, 8)),
              lambda v: np.min(_window_gaps(v)[1]) > 1e-3)
    rng = RngStream(derive_seed(seed, 5, MAX_DRAWS))
    pooled, idx, tape = layers.maxpool2x2_forward(x)
    r = rng.uniform(-1, 1, pooled.shape)
    report.add('maxpool', layers.maxpool2x2_backward(tape, r),
               finite_diff(_project(lambda v: layers.maxpool2x2_forward(v)[0], r), x), defaults.TOL_LAYER)

    v = rng.uniform(-1, 1, pooled.shape)
    out, tape = layers.unpool2x2_forward(v, idx)
    r = rng.uniform(-1, 1, out.shape)
    report.add('unpool', layers.unpool2x2_backward(tape, r),
               finite_diff(_project(lambda u: layers.unpool2x2_forward(u, idx)[0], r), v), defaults.TOL_UNPOOL)


def _check_losses(report, seed):
    rng = RngStream(derive_seed(seed, 6))
    pred = rng.uniform(0, 1, (2, 1, 9, 8))
    target = rng.uniform(0, 1, pred.shape)
    weights = loss.edge_weight_map(target, defaults.EDGE_BETA)

    report.add('l2', loss.l2_loss(pred, target)[1],
               finite_diff(lambda v: loss.l2_loss(v, target)[0], pred), defaults.TOL_L2)
    report.add('l2.weighted', loss.l2_loss(pred, target, weights)[1],
               finite_diff(lambda v: loss.l2_loss(v, target, weights)[0], pred), defaults.TOL_L2)
    for mode in defaults.SSIM_MODES:
        cfg = loss.SsimConfig(mode=mode, window=5)
        report.add('ssim.' + mode, loss.ssim_loss(pred, target, cfg)[1],
                   finite_diff(lambda v: loss.ssim_loss(v, target, cfg)[0], pred), defaults.TOL_SSIM)
    cfg = loss.SsimConfig(mode='local', window=5)
    report.add('ssim.local.weighted', loss.ssim_loss(pred, target, cfg, weights)[1],
               finite_diff(lambda v: loss.ssim_loss(v, target, cfg, weights)[0], pred), defaults.TOL_SSIM)


def _tv_image(rng):
    # A tilted plane plus mild noise keeps every |p| and |q| well above zero.
    a, b = rng.uniform(0.2, 0.5, 2) * np.where(rng.random(2) < 0.5, -1.0, 1.0)
    rows, cols = np.mgrid[0:7, 0:6]
    plane = a * rows + b * cols
    return (plane + rng.uniform(-0.05, 0.05, (2, 1, 7, 6)))


def _tv_accept(x):
    p = x[:, :, 1:, :-1] - x[:, :, :-1, :-1]
    q = x[:, :, :-1, 1:] - x[:, :, :-1, :-1]
    return np.min(np.abs(p)) > 0.05 and np.min(np.abs(q)) > 0.05


def _check_tv(report, seed):
    x = _draw('tv', seed, 7, _tv_image, _tv_accept)
    report.add('tv', loss.tv_loss(x, defaults.TV_EPS)[1],
               finite_diff(lambda v: loss.tv_loss(v, defaults.TV_EPS)[0], x), defaults.TOL_TV)


def _check_weight_decay(report, seed):
    rng = RngStream(derive_seed(seed, 8))
    _, params = model.build_model(model.Topology('siso', 1, (2,), 2), rng, 'double')
    _, grads = loss.weight_decay(params)
    name = params.conv_weight_names()[0]

    def objective(w):
        trial = params.copy()
        trial[name] = w
        return loss.weight_decay(trial)[0]

    report.add('weight_decay', grads[name], finite_diff(objective, params[name]), defaults.TOL_L2)


def _away_from_kinks(net, params, inputs, margin=1e-3):
    _, trace = net.forward(params, inputs, layers.TRAIN)
    for name, tape in trace.tapes.items():
        if tape.kind != 'batchnorm':
            continue
        gamma = params[name + '.gamma'][None, :, None, None]
        beta = params[name + '.beta'][None, :, None, None]
        if np.min(np.abs(gamma * tape.xhat + beta)) < margin:
            return False
    for feature in trace.features.values():
        top, gap = _window_gaps(feature)
        if np.any((top > 0) & (gap < margin)):
            return False
    return True


def _tiny_case(topology):
    def make(rng):
        net, params = model.build_model(topology, rng, 'double')
        for name in params:
            if not name.endswith('.conv.weight'):
                params[name] = params[name] + rng.uniform(-0.3, 0.3, params[name].shape)
        inputs = [rng.uniform(0, 1, (2, 1, 8, 8)) for _ in range(topology.in_arms)]
        return net, params, inputs
    return make


def _model_projection(net, params, inputs, r):
    predictions, _ = net.forward(params, inputs, layers.TRAIN)
    return float(sum(np.sum(p * q) for p, q in zip(predictions, r)))


def _param_fd(params, objective):
    numeric = []
    for name in params:
        def f(w, name=name):
            saved = params[name]
            params[name] = w
            try:
                return objective(params)
            finally:
                params[name] = saved
        numeric.append(finite_diff(f, params[name]).ravel())
    return np.concatenate(numeric)


def _flatten(grads, params):
    return np.concatenate([grads[name].ravel() for name in params])


def tiny_topology(kind):
    """Graph of the whole-model checks: one level of four channels, run on 8x8 inputs."""
    return model.Topology(kind, 1, (4,), 4)


def _check_model(report, seed, kind, key):
    # Pre-activations stay 1e-3 away from zero and pooled maxima lead by 1e-3.
    topology = tiny_topology(kind)
    net, params, inputs = _draw('model.' + kind, seed, key, _tiny_case(topology),
                                lambda case: _away_from_kinks(*case))
    rng = RngStream(derive_seed(seed, key, MAX_DRAWS))
    r = [rng.uniform(-1, 1, (2, 1, 8, 8)) for _ in range(topology.out_arms)]
    _, trace = net.forward(params, inputs, layers.TRAIN)
    grads = net.backward(params, trace, r)
    numeric = _param_fd(params, lambda p: _model_projection(net, p, inputs, r))
    report.add('model.%s.d1_8x8' % kind, _flatten(grads, params), numeric, defaults.TOL_MODEL)


def _check_model_loss(report, seed):
    # Whole chain: joint loss (L2, SSIM, weight decay) through a SISO graph.
    topology = tiny_topology('siso')
    net, params, inputs = _draw('model.joint', seed, 12, _tiny_case(topology),
                                lambda case: _away_from_kinks(*case))
    rng = RngStream(derive_seed(seed, 12, MAX_DRAWS))
    targets = [rng.uniform(0, 1, (2, 1, 8, 8))]
    weights = loss.LossWeights(10.0, 5.0, 0.0, 1e-4)
    cfg = loss.SsimConfig(window=3)

    def objective(p):
        predictions, _ = net.forward(p, inputs, layers.TRAIN)
        return loss.joint_loss(predictions, targets, p, weights, cfg).total

    predictions, trace = net.forward(params, inputs, layers.TRAIN)
    result = loss.joint_loss(predictions, targets, params, weights, cfg)
    grads = net.backward(params, trace, result.grads)
    for name, g in result.wd_grads.items():
        grads[name] = grads[name] + weights.l4 * g
    report.add('model.siso.joint_loss', _flatten(grads, params), _param_fd(params, objective),
               defaults.TOL_MODEL)


def gradcheck_suite(seed=defaults.SEED):
    """Run every layer, loss and tiny-model gradient check in a fixed order.

    All checks use double precision and central differences with step
    ``defaults.FD_STEP``. A check group that raises (for example a non-finite
    objective) becomes one failing entry and the remaining groups still run.

    Returns
    -------
    GradcheckReport

    """
    report = GradcheckReport()
    groups = [
        ('conv3x3', functools.partial(_check_conv, report, seed, 3, 0)),
        ('conv1x1', functools.partial(_check_conv, report, seed, 1, 1)),
        ('conv.oracle', functools.partial(_check_conv_oracle, report, seed)),
        ('batchnorm', functools.partial(_check_batchnorm, report, seed)),
        ('relu', functools.partial(_check_relu, report, seed)),
        ('pooling', functools.partial(_check_pooling, report, seed)),
        ('losses', functools.partial(_check_losses, report, seed)),
        ('tv', functools.partial(_check_tv, report, seed)),
        ('weight_decay', functools.partial(_check_weight_decay, report, seed)),
        ('model.siso', functools.partial(_check_model, report, seed, 'siso', 9)),
        ('model.miso', functools.partial(_check_model, report, seed, 'miso', 10)),
        ('model.mimo', functools.partial(_check_model, report, seed, 'mimo', 11)),
        ('model.joint', functools.partial(_check_model_loss, report, seed)),
    ]
    for group, run in groups:
        try:
            run()
        except SynNetError as e:
            report.fail(group, str(e))
    logger.info("Gradient checks: %d/%d passed, max relative error %.3e",
                len(report.checks) - len(report.failures()), len(report.checks), report.max_error)
    return report
