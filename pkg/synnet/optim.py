"""Mini-batch SGD with momentum and the epoch/iteration training loop."""
import collections
import logging
import math

import numpy as np

from . import data, defaults, layers
from .exceptions import DivergenceError, ParameterError, UsageError
from .loss import LossWeights, SsimConfig, edge_weight_map, joint_loss, uses_edge_weights
from .model import commit_running_stats
from .tensor import resolve_dtype

logger = logging.getLogger(__name__)


class OptimState(object):
    """Momentum velocity (one tensor per learnable parameter) and the step counter."""

    def __init__(self, velocity, iteration=0, lr=defaults.LR, momentum=defaults.MOMENTUM):
        if not lr > 0:
            raise ParameterError("learning rate must be positive, got %r" % lr)
        if not 0 <= momentum < 1:
            raise ParameterError("momentum must lie in [0, 1), got %r" % momentum)
        self.velocity = velocity
        self.iteration = int(iteration)
        self.lr = float(lr)
        self.momentum = float(momentum)

    @classmethod
    def fresh(cls, params, lr=defaults.LR, momentum=defaults.MOMENTUM):
        return cls(params.zeros_like(), 0, lr, momentum)

    @classmethod
    def from_config(cls, cfg, params):
        return cls.fresh(params, lr=cfg.lr, momentum=cfg.momentum)


def sgd_step(params, grads, state):
    """One momentum step: ``v <- momentum * v + lr * g`` then ``theta <- theta - v``.

    ``grads`` must already contain the weight-decay contribution. Neither
    input is modified; returns the new ``(params, state)``.
    """
    if set(grads) != set(params.tensors) or set(state.velocity) != set(params.tensors):
        raise UsageError("gradients and velocity must cover exactly the learnable parameters")
    new_params = params.copy()
    velocity = collections.OrderedDict()
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape or state.velocity[name].shape != theta.shape:
            raise UsageError("shape mismatch for %s: param %s, grad %s, velocity %s"
                             % (name, theta.shape, g.shape, state.velocity[name].shape))
        v = state.momentum * state.velocity[name] + state.lr * g
        velocity[name] = v.astype(theta.dtype)
        new_params[name] = (theta - velocity[name]).astype(theta.dtype)
    return new_params, OptimState(velocity, state.iteration + 1, state.lr, state.momentum)


class TrainConfig(object):
    """Everything the training loop needs besides the graph and the data."""

    def __init__(self, batch_size=defaults.BATCH_SIZE, epochs=defaults.EPOCHS, seed=defaults.SEED,
                 loss=defaults.LOSS, weights=None, ssim=None, edge_beta=defaults.EDGE_BETA,
                 tv_eps=defaults.TV_EPS, shuffle=defaults.SHUFFLE, augment=defaults.AUGMENT,
                 input_modalities=None, output_modalities=None, dtype=defaults.DTYPE,
                 lr=defaults.LR, momentum=defaults.MOMENTUM):
        if batch_size < 1:
            raise ParameterError("batch_size must be at least 1, got %d" % batch_size)
        if epochs < 1:
            raise ParameterError("epochs must be at least 1, got %d" % epochs)
        if loss not in defaults.LOSSES:
            raise ParameterError("unknown loss %r" % loss)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.seed = int(seed)
        self.loss = loss
        self.weights = (weights or LossWeights()).for_loss(loss)
        self.ssim = ssim or SsimConfig()
        self.edge_beta = float(edge_beta)
        self.tv_eps = float(tv_eps)
        self.shuffle = bool(shuffle)
        self.augment = bool(augment)
        self.input_modalities = tuple(input_modalities or defaults.INPUT_MODALITIES['siso'])
        self.output_modalities = tuple(output_modalities or defaults.OUTPUT_MODALITIES['siso'])
        self.dtype = resolve_dtype(dtype)
        self.lr = float(lr)
        self.momentum = float(momentum)

    @classmethod
    def from_config(cls, cfg):
        return cls(
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            seed=cfg.seed,
            loss=cfg.loss,
            weights=LossWeights.from_config(cfg),
            ssim=SsimConfig.from_config(cfg),
            edge_beta=cfg.edge_beta,
            tv_eps=cfg.tv_eps,
            shuffle=cfg.shuffle,
            augment=cfg.augment,
            input_modalities=cfg.input_modalities,
            output_modalities=cfg.output_modalities,
            dtype=cfg.dtype,
            lr=cfg.lr,
            momentum=cfg.momentum,
        )


HistoryRow = collections.namedtuple('HistoryRow', defaults.HISTORY_COLUMNS)


class TrainResult(object):

    def __init__(self, params, history, epoch_means, state):
        self.params = params
        self.history = history
        self.epoch_means = epoch_means
        self.state = state


def iterations_per_epoch(samples, batch_size):
    return int(math.ceil(samples / float(batch_size)))


def train_step(model, params, state, inputs, targets, cfg, epoch=0):
    """Forward, loss, backward and one SGD step on a single mini-batch.

    Returns
    -------
    (ParamSet, OptimState, LossReport)

    """
    factor = model.topology.factor
    padded = [data.pad_to_multiple(x, factor) for x in inputs]
    record = padded[0][1]
    predictions, trace = model.forward(params, [x for x, _ in padded], layers.TRAIN)
    predictions = [data.crop_back(p, record) for p in predictions]

    maps = None
    if uses_edge_weights(cfg.loss):
        maps = [edge_weight_map(t, cfg.edge_beta) for t in targets]
    report = joint_loss(predictions, targets, params, cfg.weights, cfg.ssim, maps, cfg.tv_eps)
    if not np.isfinite(report.total):
        raise DivergenceError(state.iteration + 1, "total loss became %r in epoch %d"
                              % (report.total, epoch))

    grads = model.backward(params, trace, [data.uncrop(g, record) for g in report.grads])
    for name, g in report.wd_grads.items():
        grads[name] = grads[name] + cfg.weights.l4 * g
    params, state = sgd_step(params, grads, state)
    commit_running_stats(params, trace)
    return params, state, report


def train(model, params, dataset, cfg, state=None, start_epoch=0):
    """Run epochs ``start_epoch .. cfg.epochs - 1`` of mini-batch SGD.

    Every epoch draws its shuffling and augmentation from a seed derived
    from ``cfg.seed`` and the epoch number, so a run resumed from a
    checkpoint continues exactly like an uninterrupted one.

    Returns
    -------
    TrainResult

    """
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    topology = model.topology
    if len(cfg.input_modalities) != topology.in_arms or len(cfg.output_modalities) != topology.out_arms:
        raise UsageError("%s graph needs %d input and %d output modalities, got %s -> %s"
                         % (topology.kind, topology.in_arms, topology.out_arms,
                            ','.join(cfg.input_modalities), ','.join(cfg.output_modalities)))
    if state is None:
        state = OptimState.fresh(params, cfg.lr, cfg.momentum)

    history, epoch_means = [], []
    per_epoch = iterations_per_epoch(len(dataset), cfg.batch_size)
    for epoch in range(start_epoch, cfg.epochs):
        rows = []
        stream = data.batches(dataset, cfg.input_modalities, cfg.output_modalities, cfg.batch_size,
                              data.epoch_seed(cfg.seed, epoch), cfg.augment, cfg.shuffle, cfg.dtype)
        for inputs, targets in stream:
            params, state, report = train_step(model, params, state, inputs, targets, cfg, epoch)
            row = HistoryRow(state.iteration, epoch, *report.terms())
            rows.append(row)
            logger.debug("iter %d (epoch %d, %d/%d): l2=%.6g ssim=%.6g tv=%.6g total=%.6g",
                         row.iter, epoch, len(rows), per_epoch, row.l2, row.ssim, row.tv, row.total)
        means = dict((key, float(np.mean([getattr(r, key) for r in rows])))
                     for key in ('l2', 'ssim', 'tv', 'wd', 'total'))
        epoch_means.append(means)
        history.extend(rows)
        logger.info("Epoch %d/%d: mean l2=%.6g ssim=%.6g total=%.6g",
                    epoch + 1, cfg.epochs, means['l2'], means['ssim'], means['total'])
    return TrainResult(params, history, epoch_means, state)
