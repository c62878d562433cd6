"""Error hierarchy shared by every synnet module.

All errors derive from ``SynNetError`` and carry a short ``kind`` tag that the
command line prints as a machine-parseable prefix.
"""


class SynNetError(Exception):
    """Base class of every error raised by synnet."""

    kind = 'error'


class ShapeError(SynNetError, ValueError):
    """Tensor shapes or arities do not agree."""

    kind = 'shape'


class DegenerateStatisticsError(ShapeError):
    """Batch statistics requested over a single element per channel."""


class ParameterError(SynNetError, ValueError):
    """A scalar argument is outside its valid range."""

    kind = 'parameter'


class UsageError(SynNetError, RuntimeError):
    """An API was called out of order or with the wrong kind of object."""

    kind = 'usage'


class ConfigError(SynNetError, ValueError):
    """A run configuration could not be parsed or validated."""

    kind = 'config'

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = 'line %d: %s' % (lineno, message)
        super(ConfigError, self).__init__(message)
        self.lineno = lineno


class ParseError(SynNetError, ValueError):
    """A file on disk is malformed."""

    kind = 'parse'

    def __init__(self, message, offset=None):
        if offset is not None:
            message = '%s (at byte %d)' % (message, offset)
        super(ParseError, self).__init__(message)
        self.offset = offset


class CheckpointError(SynNetError, ValueError):
    """A checkpoint file could not be decoded."""

    kind = 'checkpoint'

    def __init__(self, field, message):
        super(CheckpointError, self).__init__('%s: %s' % (field, message))
        self.field = field


class DivergenceError(SynNetError, ArithmeticError):
    """The training loss became NaN or infinite."""

    kind = 'divergence'

    def __init__(self, iteration, message):
        super(DivergenceError, self).__init__(
            'iteration %d: %s' % (iteration, message))
        self.iteration = iteration


class DataError(SynNetError, LookupError):
    """Requested data (a modality, a sample file) does not exist."""

    kind = 'data'
