"""SynNet graphs: encoder arms, decoder arms and synthesis heads.

Encoder block ``i``: conv3x3 -> batch-norm -> ReLU -> 2x2 max-pool (indices kept).
Decoder block ``i``: unpool with the matched encoder indices -> concatenate the
matched encoder feature maps -> conv3x3 -> batch-norm -> ReLU.
Synthesis head: conv1x1 (head_width -> 1) -> linear activation.

SISO runs one arm end to end. MISO channel-concatenates the two encoder
bottlenecks, reduces them with a 1x1 convolution and feeds one decoder arm.
MIMO fuses the bottlenecks the same way once per decoder arm and runs two
decoder arms with their own heads.
"""
import collections
import logging
import math

import numpy as np

from . import defaults, layers
from .exceptions import ParameterError, ShapeError, UsageError
from .tensor import RngStream, Shape4, concat_all, resolve_dtype, tensor_random
from .utils import derive_seed

logger = logging.getLogger(__name__)

ARMS = {
    'siso': (1, 1),
    'miso': (2, 1),
    'mimo': (2, 2),
}

_BUFFER_SUFFIXES = ('.running_mean', '.running_var')


class Topology(object):
    """Shape of a SynNet graph.

    Parameters
    ----------
    kind : str
        ``siso``, ``miso`` or ``mimo``.
    depth : int
        Number of encoder blocks per arm.
    channels : sequence of int
        Output width of each encoder level, ``len(channels) == depth``.
    head_width : int
        Width of the last decoder stage feeding the synthesis heads.
    skip_connections : bool
        Concatenate matched encoder maps into the decoder; ``False`` keeps
        only the unpooled path.
    miso_index_arm : int
        Encoder arm whose pooling indices drive the shared MISO decoder.
    mimo_skip : str
        ``both``: every MIMO decoder receives both encoders' matched maps.
        ``matched``: decoder ``k`` only receives encoder ``k``'s maps.
    bn_eps, bn_momentum : float
        Batch-norm stabilizer and running-average factor.

    """

    def __init__(self, kind=defaults.TOPOLOGY, depth=defaults.DEPTH,
                 channels=defaults.CHANNELS, head_width=defaults.HEAD_WIDTH,
                 skip_connections=defaults.SKIP_CONNECTIONS,
                 miso_index_arm=defaults.MISO_INDEX_ARM,
                 mimo_skip=defaults.MIMO_SKIP,
                 bn_eps=defaults.BN_EPS, bn_momentum=defaults.BN_MOMENTUM):
        if kind not in ARMS:
            raise ParameterError("unknown topology %r" % kind)
        channels = tuple(int(c) for c in channels)
        if depth < 1 or len(channels) != depth:
            raise ParameterError("need one channel width per level: depth %d, channels %s"
                                 % (depth, channels))
        if min(channels) < 1 or head_width < 1:
            raise ParameterError("channel widths must be positive")
        if miso_index_arm not in (0, 1):
            raise ParameterError("miso_index_arm must be 0 or 1")
        if mimo_skip not in defaults.MIMO_SKIP_MODES:
            raise ParameterError("unknown mimo_skip %r" % mimo_skip)
        self.kind = kind
        self.depth = int(depth)
        self.channels = channels
        self.head_width = int(head_width)
        self.skip_connections = bool(skip_connections)
        self.miso_index_arm = int(miso_index_arm)
        self.mimo_skip = mimo_skip
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum

    @classmethod
    def from_config(cls, cfg):
        return cls(
            kind=cfg.topology,
            depth=cfg.depth,
            channels=cfg.channels,
            head_width=cfg.head_width,
            skip_connections=cfg.skip_connections,
            miso_index_arm=cfg.miso_index_arm,
            mimo_skip=cfg.mimo_skip,
            bn_eps=cfg.bn_eps,
            bn_momentum=cfg.bn_momentum,
        )

    def __eq__(self, other):
        return isinstance(other, Topology) and self.__dict__ == other.__dict__

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'Topology(%s)' % ', '.join('%s=%r' % kv for kv in sorted(self.__dict__.items()))

    @property
    def in_arms(self):
        return ARMS[self.kind][0]

    @property
    def out_arms(self):
        return ARMS[self.kind][1]

    @property
    def factor(self):
        """Spatial sizes must be multiples of this (one halving per level)."""
        return 2 ** self.depth

    def index_arm(self, decoder):
        """Encoder arm whose pooling indices drive decoder arm ``decoder``."""
        if self.kind == 'siso':
            return 0
        if self.kind == 'miso':
            return self.miso_index_arm
        return decoder

    def skip_arms(self, decoder):
        """Encoder arms whose matched feature maps decoder ``decoder`` concatenates."""
        if not self.skip_connections:
            return ()
        if self.kind == 'siso':
            return (0,)
        if self.kind == 'mimo' and self.mimo_skip == 'matched':
            return (decoder,)
        return (0, 1)

    def decoder_width(self, level):
        return self.channels[level - 1] if level > 0 else self.head_width


class ParamSet(object):
    """Ordered named tensors of a graph: learnable entries plus batch-norm buffers.

    Iterating yields the learnable names in creation order; running statistics
    live in ``buffers`` and never receive gradients.
    """

    def __init__(self):
        self.tensors = collections.OrderedDict()
        self.buffers = collections.OrderedDict()

    def add(self, name, value):
        if name in self.tensors or name in self.buffers:
            raise UsageError("duplicate parameter name %r" % name)
        if name.endswith(_BUFFER_SUFFIXES):
            self.buffers[name] = value
        else:
            self.tensors[name] = value

    def __getitem__(self, name):
        if name in self.tensors:
            return self.tensors[name]
        return self.buffers[name]

    def __setitem__(self, name, value):
        if name in self.tensors:
            self.tensors[name] = value
        elif name in self.buffers:
            self.buffers[name] = value
        else:
            raise KeyError(name)

    def __contains__(self, name):
        return name in self.tensors or name in self.buffers

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def all_items(self):
        """Learnable tensors then buffers, each in creation order."""
        return list(self.tensors.items()) + list(self.buffers.items())

    def copy(self):
        clone = ParamSet()
        for name, value in self.all_items():
            clone.add(name, value.copy())
        return clone

    def zeros_like(self):
        return collections.OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())

    def count(self):
        """Number of learnable scalars."""
        return sum(v.size for v in self.tensors.values())

    def conv_weight_names(self):
        return [k for k in self.tensors if k.endswith('.conv.weight')]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def conv(self, prefix):
        return layers.ConvParams(self[prefix + '.weight'], self[prefix + '.bias'])

    def batchnorm(self, prefix, eps, momentum):
        return layers.BatchNormParams(
            self[prefix + '.gamma'], self[prefix + '.beta'],
            self[prefix + '.running_mean'], self[prefix + '.running_var'],
            eps=eps, momentum=momentum)


class ForwardTrace(object):
    """Tapes, pooling indices and skip maps of one forward pass; consumed by one backward."""

    def __init__(self, mode):
        self.mode = mode
        self.tapes = {}
        self.features = {}
        self.running_stats = collections.OrderedDict()
        self.predictions = []
        self.consumed = False

    def record(self, name, tape):
        if self.mode == layers.TRAIN:
            self.tapes[name] = tape
            if tape.kind == 'batchnorm':
                self.running_stats[name] = (tape.running_mean, tape.running_var)


def _enc(arm, level):
    return 'enc.arm%d.block%d' % (arm, level)


def _dec(arm, level):
    return 'dec.arm%d.block%d' % (arm, level)


def _fuse(arm):
    return 'fuse.arm%d' % arm


def _head(arm):
    return 'head.arm%d' % arm


class SynNetModel(object):
    """Computation graph of one topology. Holds no parameter values."""

    def __init__(self, topology):
        self.topology = topology

    def conv_layers(self):
        """``(prefix, in_c, out_c, k, has_batchnorm)`` per convolution, in creation order."""
        t = self.topology
        specs = []
        for arm in range(t.in_arms):
            for level in range(t.depth):
                in_c = 1 if level == 0 else t.channels[level - 1]
                specs.append((_enc(arm, level), in_c, t.channels[level], 3, True))
        bottleneck = t.channels[-1]
        for dec in range(t.out_arms):
            if t.in_arms > 1:
                specs.append((_fuse(dec), t.in_arms * bottleneck, bottleneck, 1, False))
            for level in reversed(range(t.depth)):
                skips = len(t.skip_arms(dec)) * t.channels[level]
                specs.append((_dec(dec, level), t.channels[level] + skips,
                              t.decoder_width(level), 3, True))
            specs.append((_head(dec), t.head_width, 1, 1, False))
        return specs

    def forward(self, params, inputs, mode=layers.TRAIN):
        t = self.topology
        inputs = self._check_inputs(params, inputs)
        trace = ForwardTrace(mode)

        features, indices, bottlenecks = {}, {}, []
        for arm in range(t.in_arms):
            x = inputs[arm]
            for level in range(t.depth):
                prefix = _enc(arm, level)
                x = self._conv_bn_relu(params, prefix, x, mode, trace)
                features[arm, level] = x
                x, indices[arm, level], tape = layers.maxpool2x2_forward(x)
                trace.record(prefix + '.pool', tape)
            bottlenecks.append(x)

        for dec in range(t.out_arms):
            if t.in_arms > 1:
                y, tape = layers.conv2d_forward(concat_all(bottlenecks), params.conv(_fuse(dec) + '.conv'))
                trace.record(_fuse(dec) + '.conv', tape)
            else:
                y = bottlenecks[0]
            source = t.index_arm(dec)
            for level in reversed(range(t.depth)):
                prefix = _dec(dec, level)
                u, tape = layers.unpool2x2_forward(y, indices[source, level])
                trace.record(prefix + '.unpool', tape)
                parts = [u] + [features[arm, level] for arm in t.skip_arms(dec)]
                y = self._conv_bn_relu(params, prefix, concat_all(parts), mode, trace)
            out, tape = layers.conv2d_forward(y, params.conv(_head(dec) + '.conv'))
            trace.record(_head(dec) + '.conv', tape)
            trace.predictions.append(layers.linear_activation(out))

        if mode == layers.TRAIN:
            trace.features = features
        return list(trace.predictions), trace

    def backward(self, params, trace, grad_predictions):
        t = self.topology
        if trace.mode != layers.TRAIN:
            raise UsageError("backward needs a train-mode trace")
        if trace.consumed:
            raise UsageError("forward trace already consumed by a backward pass")
        if len(grad_predictions) != len(trace.predictions):
            raise UsageError("expected %d prediction gradients, got %d"
                             % (len(trace.predictions), len(grad_predictions)))
        for grad, pred in zip(grad_predictions, trace.predictions):
            if grad.shape != pred.shape:
                raise ShapeError("gradient %s does not match prediction %s"
                                 % (grad.shape, pred.shape))
        trace.consumed = True

        grads = params.zeros_like()
        grad_features = {key: np.zeros_like(f) for key, f in trace.features.items()}
        grad_bottlenecks = {}

        for dec in range(t.out_arms):
            g = layers.linear_activation_backward(grad_predictions[dec])
            g = self._conv_backward(trace, _head(dec) + '.conv', g, grads)
            for level in range(t.depth):
                prefix = _dec(dec, level)
                g = self._conv_bn_relu_backward(trace, prefix, g, grads)
                width = t.channels[level]
                for slot, arm in enumerate(t.skip_arms(dec), 1):
                    grad_features[arm, level] += g[:, slot * width:(slot + 1) * width]
                g = layers.unpool2x2_backward(trace.tapes[prefix + '.unpool'], g[:, :width])
            if t.in_arms > 1:
                g = self._conv_backward(trace, _fuse(dec) + '.conv', g, grads)
                width = t.channels[-1]
                for arm in range(t.in_arms):
                    _accumulate(grad_bottlenecks, arm, g[:, arm * width:(arm + 1) * width])
            else:
                _accumulate(grad_bottlenecks, 0, g)

        for arm in range(t.in_arms):
            g = grad_bottlenecks[arm]
            for level in reversed(range(t.depth)):
                prefix = _enc(arm, level)
                g = layers.maxpool2x2_backward(trace.tapes[prefix + '.pool'], g)
                # The skip path joins the pooling path at the pre-pool feature map.
                g = g + grad_features[arm, level]
                g = self._conv_bn_relu_backward(trace, prefix, g, grads)
        return grads

    def _check_inputs(self, params, inputs):
        t = self.topology
        if len(inputs) != t.in_arms:
            raise UsageError("%s graph takes %d inputs, got %d" % (t.kind, t.in_arms, len(inputs)))
        shapes = set(tuple(x.shape) for x in inputs)
        if len(shapes) != 1:
            raise ShapeError("input arms differ in shape: %s" % sorted(shapes))
        shape = Shape4.of(inputs[0])
        if shape.c != 1:
            raise ShapeError("each input arm takes a single-channel image, got %d channels" % shape.c)
        if shape.h % t.factor or shape.w % t.factor:
            raise ShapeError("input %dx%d is not divisible by %d; pad it first"
                             % (shape.h, shape.w, t.factor))
        dtype = params.dtype
        return [np.asarray(x, dtype=dtype) for x in inputs]

    def _conv_bn_relu(self, params, prefix, x, mode, trace):
        t = self.topology
        y, tape = layers.conv2d_forward(x, params.conv(prefix + '.conv'))
        trace.record(prefix + '.conv', tape)
        bn = params.batchnorm(prefix + '.bn', t.bn_eps, t.bn_momentum)
        y, tape = layers.batchnorm_forward(y, bn, mode)
        trace.record(prefix + '.bn', tape)
        y, tape = layers.relu_forward(y)
        trace.record(prefix + '.relu', tape)
        return y

    def _conv_bn_relu_backward(self, trace, prefix, g, grads):
        g = layers.relu_backward(trace.tapes[prefix + '.relu'], g)
        g, grad_gamma, grad_beta = layers.batchnorm_backward(trace.tapes[prefix + '.bn'], g)
        grads[prefix + '.bn.gamma'] += grad_gamma
        grads[prefix + '.bn.beta'] += grad_beta
        return self._conv_backward(trace, prefix + '.conv', g, grads)

    def _conv_backward(self, trace, name, g, grads):
        g, grad_p = layers.conv2d_backward(trace.tapes[name], g)
        grads[name + '.weight'] += grad_p.weight
        grads[name + '.bias'] += grad_p.bias
        return g


def _accumulate(store, key, value):
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def init_scale(in_c, k):
    """Half-width of the uniform weight initialisation, sqrt(1 / fan_in)."""
    return math.sqrt(1.0 / (in_c * k * k))


def init_seed(seed):
    """Seed of the weight initialisation stream, disjoint from every epoch stream."""
    return derive_seed(seed, 0, 1)


def build_model(topology, rng, dtype=defaults.DTYPE):
    """Create the graph of ``topology`` and freshly initialised parameters.

    Convolution weights are uniform in ``[-s, s]`` with ``s = sqrt(1 / fan_in)``;
    biases and batch-norm shifts start at 0, scales at 1, running statistics
    at mean 0 / variance 1.

    Returns
    -------
    (SynNetModel, ParamSet)

    """
    if not isinstance(rng, RngStream):
        rng = RngStream(rng)
    dtype = resolve_dtype(dtype)
    model = SynNetModel(topology)
    params = ParamSet()
    for prefix, in_c, out_c, k, has_bn in model.conv_layers():
        params.add(prefix + '.conv.weight',
                   tensor_random((out_c, in_c, k, k), rng, init_scale(in_c, k), dtype))
        params.add(prefix + '.conv.bias', np.zeros(out_c, dtype=dtype))
        if has_bn:
            params.add(prefix + '.bn.gamma', np.ones(out_c, dtype=dtype))
            params.add(prefix + '.bn.beta', np.zeros(out_c, dtype=dtype))
            params.add(prefix + '.bn.running_mean', np.zeros(out_c, dtype=dtype))
            params.add(prefix + '.bn.running_var', np.ones(out_c, dtype=dtype))
    logger.debug("Built %s graph: depth %d, channels %s, %d learnable scalars",
                 topology.kind, topology.depth, topology.channels, params.count())
    return model, params


def forward(model, params, inputs, mode=layers.TRAIN):
    """Run the whole graph; returns one prediction per synthesis head and the trace."""
    return model.forward(params, inputs, mode)


def backward(model, params, trace, grad_predictions):
    """Gradients of every learnable tensor, keyed like ``params``."""
    return model.backward(params, trace, grad_predictions)


def commit_running_stats(params, trace):
    """Write the batch-norm running statistics of a train-mode pass into ``params``."""
    for name, (mean, var) in trace.running_stats.items():
        params[name + '.running_mean'] = mean.astype(params.dtype)
        params[name + '.running_var'] = var.astype(params.dtype)
