"""Run configuration text and bit-exact binary checkpoints.

Config grammar: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Missing keys take their defaults from ``synnet.defaults``.

Checkpoint layout (little-endian)::

    magic "SYNNETCK" | u32 version
    u8 topology kind | u32 depth | depth x u32 channel widths
    u32 tensor count
    per tensor: u32 name length | name (UTF-8) | u8 dtype (0 single, 1 double)
                u32 ndim | ndim x u32 dims | raw scalars
    u32 config length | config text (UTF-8)
"""
import collections
import dataclasses
import logging
import struct

import numpy as np

from . import defaults
from .exceptions import CheckpointError, ConfigError, SynNetError
from .model import ARMS, ParamSet, SynNetModel, Topology
from .optim import OptimState
from .utils import list_to_str, str_to_list

logger = logging.getLogger(__name__)

_TRUE = ('true', 'yes', '1')
_FALSE = ('false', 'no', '0')


def _parse_bool(text):
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError("expected a boolean, got %r" % text)


def _format_bool(value):
    return 'true' if value else 'false'


def _parse_ints(text):
    return tuple(int(v) for v in str_to_list(text))


def _parse_names(text):
    names = tuple(str_to_list(text))
    if not names:
        raise ValueError("empty list")
    return names


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError("expected one of %s, got %r" % (', '.join(options), text))
        return text
    return parse


# key -> (parse, format), in the order format_config writes them.
FIELD_CODECS = collections.OrderedDict([
    ('topology', (_choice(defaults.TOPOLOGIES), str)),
    ('depth', (int, str)),
    ('channels', (_parse_ints, list_to_str)),
    ('head_width', (int, str)),
    ('skip_connections', (_parse_bool, _format_bool)),
    ('miso_index_arm', (int, str)),
    ('mimo_skip', (_choice(defaults.MIMO_SKIP_MODES), str)),
    ('input_modalities', (_parse_names, list_to_str)),
    ('output_modalities', (_parse_names, list_to_str)),
    ('loss', (_choice(defaults.LOSSES), str)),
    ('lambda1', (float, repr)),
    ('lambda2', (float, repr)),
    ('lambda3', (float, repr)),
    ('lambda4', (float, repr)),
    ('ssim_mode', (_choice(defaults.SSIM_MODES), str)),
    ('ssim_window', (int, str)),
    ('dynamic_range', (float, repr)),
    ('edge_beta', (float, repr)),
    ('tv_eps', (float, repr)),
    ('bn_eps', (float, repr)),
    ('bn_momentum', (float, repr)),
    ('lr', (float, repr)),
    ('momentum', (float, repr)),
    ('batch_size', (int, str)),
    ('epochs', (int, str)),
    ('seed', (int, str)),
    ('shuffle', (_parse_bool, _format_bool)),
    ('augment', (_parse_bool, _format_bool)),
    ('dtype', (_choice(tuple(defaults.DTYPES)), str)),
    ('train_fraction', (float, repr)),
    ('psnr_max', (float, repr)),
])


@dataclasses.dataclass
class RunConfig(object):
    """Every tunable of a run. Modality lists default per topology."""

    topology: str = defaults.TOPOLOGY
    depth: int = defaults.DEPTH
    channels: tuple = defaults.CHANNELS
    head_width: int = defaults.HEAD_WIDTH
    skip_connections: bool = defaults.SKIP_CONNECTIONS
    miso_index_arm: int = defaults.MISO_INDEX_ARM
    mimo_skip: str = defaults.MIMO_SKIP
    input_modalities: tuple = None
    output_modalities: tuple = None
    loss: str = defaults.LOSS
    lambda1: float = defaults.LAMBDA1
    lambda2: float = defaults.LAMBDA2
    lambda3: float = defaults.LAMBDA3
    lambda4: float = defaults.LAMBDA4
    ssim_mode: str = defaults.SSIM_MODE
    ssim_window: int = defaults.SSIM_WINDOW
    dynamic_range: float = defaults.DYNAMIC_RANGE
    edge_beta: float = defaults.EDGE_BETA
    tv_eps: float = defaults.TV_EPS
    bn_eps: float = defaults.BN_EPS
    bn_momentum: float = defaults.BN_MOMENTUM
    lr: float = defaults.LR
    momentum: float = defaults.MOMENTUM
    batch_size: int = defaults.BATCH_SIZE
    epochs: int = defaults.EPOCHS
    seed: int = defaults.SEED
    shuffle: bool = defaults.SHUFFLE
    augment: bool = defaults.AUGMENT
    dtype: str = defaults.DTYPE
    train_fraction: float = defaults.TRAIN_FRACTION
    psnr_max: float = defaults.PSNR_MAX

    def __post_init__(self):
        if self.input_modalities is None:
            self.input_modalities = defaults.INPUT_MODALITIES[self.topology]
        if self.output_modalities is None:
            self.output_modalities = defaults.OUTPUT_MODALITIES[self.topology]
        self.channels = tuple(self.channels)
        self.input_modalities = tuple(self.input_modalities)
        self.output_modalities = tuple(self.output_modalities)

    def validate(self):
        """Range and cross-field checks; raises ConfigError naming the key."""
        checks = [
            ('depth', self.depth >= 1, "must be at least 1"),
            ('channels', len(self.channels) == self.depth, "needs one width per level (depth %d)" % self.depth),
            ('channels', all(c >= 1 for c in self.channels), "widths must be positive"),
            ('head_width', self.head_width >= 1, "must be at least 1"),
            ('miso_index_arm', self.miso_index_arm in (0, 1), "must be 0 or 1"),
            ('lambda1', self.lambda1 >= 0, "must be non-negative"),
            ('lambda2', self.lambda2 >= 0, "must be non-negative"),
            ('lambda3', self.lambda3 >= 0, "must be non-negative"),
            ('lambda4', self.lambda4 >= 0, "must be non-negative"),
            ('ssim_window', self.ssim_window >= 1 and self.ssim_window % 2 == 1, "must be odd"),
            ('dynamic_range', self.dynamic_range > 0, "must be positive"),
            ('edge_beta', self.edge_beta >= 0, "must be non-negative"),
            ('tv_eps', self.tv_eps >= 0, "must be non-negative"),
            ('bn_eps', self.bn_eps > 0, "must be positive"),
            ('bn_momentum', 0 <= self.bn_momentum <= 1, "must lie in [0, 1]"),
            ('lr', self.lr > 0, "must be positive"),
            ('momentum', 0 <= self.momentum < 1, "must lie in [0, 1)"),
            ('batch_size', self.batch_size >= 1, "must be at least 1"),
            ('epochs', self.epochs >= 1, "must be at least 1"),
            ('train_fraction', 0 < self.train_fraction <= 1, "must lie in (0, 1]"),
            ('psnr_max', self.psnr_max > 0, "must be positive"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError("%s %s" % (key, message))
        for key in ('input_modalities', 'output_modalities'):
            for name in getattr(self, key):
                if name not in defaults.MODALITIES:
                    raise ConfigError("%s: unknown modality %r" % (key, name))
        arms = ARMS[self.topology]
        if (len(self.input_modalities), len(self.output_modalities)) != arms:
            raise ConfigError("%s takes %d input and %d output modalities, got %s -> %s"
                              % (self.topology, arms[0], arms[1],
                                 list_to_str(self.input_modalities),
                                 list_to_str(self.output_modalities)))
        return self


def parse_config(text):
    """Parse config text into a validated RunConfig.

    Raises
    ------
    ConfigError
        Unknown or repeated key, unparseable value (with its line number) or
        an inconsistent combination of values.

    """
    values, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError("expected 'key = value', got %r" % line, lineno)
        key, raw = (part.strip() for part in line.split('=', 1))
        if key not in FIELD_CODECS:
            raise ConfigError("unknown key %r" % key, lineno)
        if key in seen:
            raise ConfigError("%s already set on line %d" % (key, seen[key]), lineno)
        parse = FIELD_CODECS[key][0]
        try:
            values[key] = parse(raw)
        except ValueError as e:
            raise ConfigError("bad value for %s: %s" % (key, e), lineno)
        seen[key] = lineno
    return RunConfig(**values).validate()


def format_config(cfg):
    """Render every key in a fixed order; ``parse_config`` reads it back unchanged."""
    lines = []
    for key, (_, fmt) in FIELD_CODECS.items():
        lines.append('%s = %s' % (key, fmt(getattr(cfg, key))))
    return '\n'.join(lines) + '\n'


def load_config(path):
    with open(path) as fp:
        return parse_config(fp.read())


_KINDS = ('siso', 'miso', 'mimo')
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}

VELOCITY_PREFIX = 'optim.velocity.'
ITERATION_NAME = 'optim.iteration'
EPOCH_NAME = 'optim.epoch'


class Checkpoint(object):
    """Topology, named tensors and the echoed run configuration of one model.

    Tensors cover the learnable parameters, the batch-norm running statistics
    and, when saved from training, the optimizer velocity and counters.
    """

    def __init__(self, topology, tensors, config_text='', version=defaults.CHECKPOINT_VERSION):
        self.topology = topology
        self.tensors = collections.OrderedDict(tensors)
        self.config_text = config_text
        self.version = version

    @classmethod
    def from_training(cls, topology, params, state=None, epoch=None, config_text=''):
        tensors = collections.OrderedDict(params.all_items())
        if state is not None:
            for name, v in state.velocity.items():
                tensors[VELOCITY_PREFIX + name] = v
            tensors[ITERATION_NAME] = np.array([state.iteration], dtype=np.float64)
            tensors[EPOCH_NAME] = np.array([0 if epoch is None else epoch], dtype=np.float64)
        return cls(topology, tensors, config_text)

    @property
    def config(self):
        return parse_config(self.config_text) if self.config_text else None

    def params(self):
        params = ParamSet()
        for name, value in self.tensors.items():
            if not name.startswith('optim.'):
                params.add(name, value)
        return params

    @property
    def has_optimizer(self):
        return ITERATION_NAME in self.tensors

    @property
    def epoch(self):
        """Completed epochs recorded by training, 0 when absent."""
        if EPOCH_NAME not in self.tensors:
            return 0
        return int(self.tensors[EPOCH_NAME][0])

    def optim_state(self, lr=defaults.LR, momentum=defaults.MOMENTUM):
        if not self.has_optimizer:
            return None
        velocity = collections.OrderedDict(
            (name[len(VELOCITY_PREFIX):], value) for name, value in self.tensors.items()
            if name.startswith(VELOCITY_PREFIX))
        return OptimState(velocity, int(self.tensors[ITERATION_NAME][0]), lr, momentum)


def _pack_topology(topology):
    head = struct.pack('<BI', _KINDS.index(topology.kind), topology.depth)
    return head + struct.pack('<%dI' % topology.depth, *topology.channels)


def save_checkpoint(path, cp):
    chunks = [defaults.CHECKPOINT_MAGIC, struct.pack('<I', cp.version), _pack_topology(cp.topology),
              struct.pack('<I', len(cp.tensors))]
    for name, value in cp.tensors.items():
        value = np.asarray(value)
        try:
            code = _DTYPE_CODES[value.dtype]
        except KeyError:
            raise CheckpointError(name, "unsupported dtype %s" % value.dtype)
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BI', code, value.ndim))
        chunks.append(struct.pack('<%dI' % value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=_CODE_DTYPES[code]).tobytes())
    config = cp.config_text.encode('utf-8')
    chunks.append(struct.pack('<I', len(config)))
    chunks.append(config)
    with open(path, 'wb') as fp:
        fp.write(b''.join(chunks))
    logger.info("Saved checkpoint with %d tensors to %s", len(cp.tensors), path)


class _Reader(object):

    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, size, field):
        if self.pos + size > len(self.raw):
            raise CheckpointError(field, "truncated at byte %d (need %d more bytes)"
                                  % (len(self.raw), self.pos + size - len(self.raw)))
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt, field):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt), field))
        return values if len(values) > 1 else values[0]

    def text(self, size, field):
        try:
            return self.take(size, field).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError(field, "not valid UTF-8 at byte %d" % (self.pos - size + e.start))


def _topology_from(kind, depth, channels, config_text):
    if config_text:
        try:
            topology = Topology.from_config(parse_config(config_text))
        except SynNetError as e:
            raise CheckpointError('config', str(e))
        if (topology.kind, topology.depth, topology.channels) != (kind, depth, channels):
            raise CheckpointError('topology', "header %s/%d/%s disagrees with config echo"
                                  % (kind, depth, list_to_str(channels)))
        return topology
    return Topology(kind=kind, depth=depth, channels=channels)


def _check_conv_shapes(topology, tensors):
    """Every convolution of ``topology`` must be stored with its exact kernel shape."""
    for prefix, in_c, out_c, k, _ in SynNetModel(topology).conv_layers():
        name = prefix + '.conv.weight'
        if name not in tensors:
            raise CheckpointError('topology', "%s graph needs %s, not in checkpoint"
                                  % (topology.kind, name))
        expected = (out_c, in_c, k, k)
        if tuple(tensors[name].shape) != expected:
            raise CheckpointError('topology', "%s has shape %s, topology expects %s"
                                  % (name, tensors[name].shape, expected))


def load_checkpoint(path):
    with open(path, 'rb') as fp:
        reader = _Reader(fp.read())
    if reader.take(len(defaults.CHECKPOINT_MAGIC), 'magic') != defaults.CHECKPOINT_MAGIC:
        raise CheckpointError('magic', "bad magic")
    version = reader.unpack('<I', 'version')
    if version != defaults.CHECKPOINT_VERSION:
        raise CheckpointError('version', "version %d, expected %d"
                              % (version, defaults.CHECKPOINT_VERSION))
    kind_code = reader.unpack('<B', 'topology.kind')
    if kind_code >= len(_KINDS):
        raise CheckpointError('topology.kind', "unknown topology code %d" % kind_code)
    depth = reader.unpack('<I', 'topology.depth')
    channels = struct.unpack('<%dI' % depth, reader.take(4 * depth, 'topology.channels'))

    tensors = collections.OrderedDict()
    for i in range(reader.unpack('<I', 'tensor_count')):
        field = 'tensor[%d]' % i
        name = reader.text(reader.unpack('<I', field + '.name_length'), field + '.name')
        code = reader.unpack('<B', name + '.dtype')
        if code not in _CODE_DTYPES:
            raise CheckpointError(name + '.dtype', "unknown dtype code %d" % code)
        ndim = reader.unpack('<I', name + '.ndim')
        shape = struct.unpack('<%dI' % ndim, reader.take(4 * ndim, name + '.dims'))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(count * dtype.itemsize, name + '.data')
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.type)
    config_text = reader.text(reader.unpack('<I', 'config_length'), 'config')

    topology = _topology_from(_KINDS[kind_code], depth, tuple(channels), config_text)
    _check_conv_shapes(topology, tensors)
    logger.debug("Loaded checkpoint %s: %s, %d tensors", path, topology.kind, len(tensors))
    return Checkpoint(topology, tensors, config_text, version)
