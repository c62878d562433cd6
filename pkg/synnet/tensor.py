"""Dense 4-D tensors in (batch, channel, height, width) row-major layout.

Tensors are plain ``numpy.ndarray`` objects; this module validates and builds
them. There is no broadcasting anywhere in synnet: elementwise operations
require identical shapes.
"""
import collections

import numpy as np

from . import defaults
from .exceptions import ParameterError, ShapeError


class Shape4(collections.namedtuple('Shape4', 'n c h w')):
    """Shape of a 4-D tensor; every dimension is strictly positive."""

    __slots__ = ()

    def __new__(cls, n, c, h, w):
        dims = tuple(int(d) for d in (n, c, h, w))
        if any(d < 1 for d in dims):
            raise ShapeError("all dimensions must be >= 1, got %s" % (dims,))
        return super(Shape4, cls).__new__(cls, *dims)

    @classmethod
    def of(cls, x):
        if np.ndim(x) != 4:
            raise ShapeError("expected a 4-D tensor, got ndim %d" % np.ndim(x))
        return cls(*x.shape)

    @property
    def size(self):
        return self.n * self.c * self.h * self.w

    def flat_index(self, n, c, h, w):
        return ((n * self.c + c) * self.h + h) * self.w + w


class RngStream(object):
    """Seeded random stream; ``counter`` counts draw calls.

    Backed by numpy's PCG64 bit generator, whose output for a given seed and
    draw sequence is the same on every platform.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.counter = 0
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return 'RngStream(seed=%d, counter=%d)' % (self.seed, self.counter)

    def uniform(self, low, high, size=None):
        self.counter += 1
        return self._generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.counter += 1
        return self._generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._generator.integers(low, high, size)

    def random(self, size=None):
        self.counter += 1
        return self._generator.random(size)

    def permutation(self, n):
        self.counter += 1
        return self._generator.permutation(n)


def resolve_dtype(dtype):
    """Map a precision tag ('single' | 'double') or numpy dtype to a numpy type."""
    if isinstance(dtype, str):
        try:
            return defaults.DTYPES[dtype]
        except KeyError:
            raise ParameterError("unknown precision %r" % dtype)
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError("unsupported dtype %r" % dtype)
    return dtype


def check_tensor(x, name='tensor'):
    """Validate that ``x`` is a finite 4-D float tensor and return its Shape4."""
    shape = Shape4.of(x)
    if not np.all(np.isfinite(x)):
        raise ParameterError("%s contains non-finite values" % name)
    return shape


def check_same_shape(a, b, what='tensors'):
    if a.shape != b.shape:
        raise ShapeError("%s differ in shape: %s vs %s" % (what, a.shape, b.shape))


def tensor_new(shape, fill=0.0, dtype=defaults.DTYPE):
    """Tensor of ``shape`` with every element equal to ``fill``."""
    shape = Shape4(*shape)
    return np.full(tuple(shape), fill, dtype=resolve_dtype(dtype))


def tensor_random(shape, rng, scale, dtype=defaults.DTYPE):
    """Tensor with elements drawn uniformly from ``[-scale, +scale]``.

    Draws are made in double precision and rounded, so the values for a
    given seed do not depend on the requested precision beyond rounding.
    """
    if not scale > 0:
        raise ParameterError("scale must be positive, got %r" % scale)
    shape = Shape4(*shape)
    values = rng.uniform(-scale, scale, tuple(shape))
    return values.astype(resolve_dtype(dtype))


def concat_channels(a, b):
    """Concatenate two tensors along the channel axis, ``a`` first."""
    sa, sb = Shape4.of(a), Shape4.of(b)
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w):
        raise ShapeError("cannot concatenate %s and %s on channels" % (a.shape, b.shape))
    return np.concatenate([a, b], axis=1)


def concat_all(tensors):
    """Channel concatenation of one or more tensors, in list order."""
    result = tensors[0]
    for other in tensors[1:]:
        result = concat_channels(result, other)
    return result


def slice_channels(x, start, stop):
    """Copy of channels ``start .. stop - 1`` of ``x``."""
    shape = Shape4.of(x)
    if not 0 <= start < stop <= shape.c:
        raise ShapeError("channel range %d..%d outside [0, %d)" % (start, stop, shape.c))
    return x[:, start:stop].copy()


def stack_batch(tensors):
    """Stack single-item tensors of equal shape along the batch axis."""
    shapes = set(t.shape[1:] for t in tensors)
    if len(shapes) != 1:
        raise ShapeError("cannot stack tensors of shapes %s" % sorted(shapes))
    return np.concatenate(tensors, axis=0)
