"""Synthetic multi-modality phantoms, augmentation, PGM files and mini-batches.

A dataset directory holds ``<root>/<sample_id>/<modality>.pgm`` for the four
modalities and a ``manifest.txt`` listing ``id<TAB>h<TAB>w`` per sample.
"""
import collections
import logging
import math
import os

import numpy as np
from scipy import ndimage

from . import defaults
from .exceptions import DataError, ParameterError, ParseError, ShapeError
from .tensor import RngStream, Shape4, resolve_dtype, stack_batch
from .utils import derive_seed, sobel_magnitude

logger = logging.getLogger(__name__)

GeometricTransform = collections.namedtuple('GeometricTransform', 'hflip vflip rot90 scale')
IDENTITY = GeometricTransform(False, False, 0, 1.0)

CropRecord = collections.namedtuple('CropRecord', 'top bottom left right')


class PhantomSample(object):
    """One synthetic subject: every modality as a (1, 1, h, w) tensor in [0, 1]."""

    def __init__(self, sample_id, modalities):
        sizes = set(m.shape for m in modalities.values())
        if len(sizes) != 1:
            raise ShapeError("modalities of %s differ in size: %s" % (sample_id, sorted(sizes)))
        self.sample_id = sample_id
        self.modalities = collections.OrderedDict(modalities)

    def __getitem__(self, modality):
        try:
            return self.modalities[modality]
        except KeyError:
            raise DataError("sample %s has no modality %r" % (self.sample_id, modality))

    @property
    def size(self):
        return next(iter(self.modalities.values())).shape[2:]


def modalities_from_base(base):
    """Derive the four modalities from a base field in [0, 1] of shape (h, w)."""
    base = np.clip(np.asarray(base, dtype=np.float64), 0.0, 1.0)
    t2 = ndimage.uniform_filter(1.0 - base, size=3, mode='nearest')
    t1c = base + 0.5 * sobel_magnitude(base)
    images = collections.OrderedDict([
        ('t1', base),
        ('t2', t2),
        ('t1c', t1c),
        ('flair', np.sqrt(base)),
    ])
    return collections.OrderedDict(
        (name, np.clip(img, 0.0, 1.0)[None, None]) for name, img in images.items())


def _base_field(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy / float(h - 1)
    xx = xx / float(w - 1)
    field = np.zeros((h, w))
    for _ in range(int(rng.integers(5, 13))):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        sigma = rng.uniform(0.03, 0.15)
        amplitude = rng.uniform(0.2, 1.0)
        field += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.25, 0.75, 2)
        a, b = rng.uniform(0.1, 0.35, 2)
        theta = rng.uniform(0.0, math.pi)
        intensity = rng.uniform(0.2, 0.6)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        field += intensity * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    field = np.clip(field, 0.0, None)
    low, high = field.min(), field.max()
    if high <= low:
        return np.zeros_like(field)
    return (field - low) / (high - low)


def generate_phantom(seed, h, w, sample_id=None):
    """Deterministic phantom of size ``h x w`` from ``seed``.

    The base field is a clipped sum of 5-12 gaussian blobs and 1-3 ellipses
    normalized to [0, 1]; the modalities are fixed transforms of it.
    """
    if h < defaults.MIN_IMAGE_SIZE or w < defaults.MIN_IMAGE_SIZE:
        raise ParameterError("phantoms need at least %dx%d pixels, got %dx%d"
                             % (defaults.MIN_IMAGE_SIZE, defaults.MIN_IMAGE_SIZE, h, w))
    base = _base_field(RngStream(seed), h, w)
    if sample_id is None:
        sample_id = 'seed%d' % seed
    return PhantomSample(sample_id, modalities_from_base(base))


def draw_transform(rng, square=True):
    """Draw one augmentation: flips, a quarter-turn rotation and a scale.

    Non-square images only rotate by 0 or 180 degrees so their size is kept.
    """
    hflip = bool(rng.random() < defaults.AUGMENT_FLIP_PROB)
    vflip = bool(rng.random() < defaults.AUGMENT_FLIP_PROB)
    rot90 = int(rng.integers(0, 4)) if square else 2 * int(rng.integers(0, 2))
    scale = defaults.AUGMENT_SCALES[int(rng.integers(0, len(defaults.AUGMENT_SCALES)))]
    return GeometricTransform(hflip, vflip, rot90, scale)


def _clipped_zoom(image, factor):
    # Bilinear rescale about the centre, then crop or zero-pad back to size.
    h, w = image.shape
    if factor < 1.0:
        zh, zw = int(round(h * factor)), int(round(w * factor))
        zoomed = ndimage.zoom(image, (zh / float(h), zw / float(w)), order=1)
        out = np.zeros_like(image)
        top, left = (h - zh) // 2, (w - zw) // 2
        out[top:top + zh, left:left + zw] = zoomed[:zh, :zw]
        return out
    zh, zw = int(round(h / factor)), int(round(w / factor))
    top, left = (h - zh) // 2, (w - zw) // 2
    zoomed = ndimage.zoom(image[top:top + zh, left:left + zw], (h / float(zh), w / float(zw)), order=1)
    trim_top, trim_left = (zoomed.shape[0] - h) // 2, (zoomed.shape[1] - w) // 2
    return zoomed[trim_top:trim_top + h, trim_left:trim_left + w]


def apply_transform(image, transform):
    """Apply ``transform`` to a 2-D image."""
    out = np.asarray(image)
    if transform.hflip:
        out = out[:, ::-1]
    if transform.vflip:
        out = out[::-1, :]
    if transform.rot90:
        out = np.rot90(out, transform.rot90)
    if transform.scale != 1.0:
        out = np.clip(_clipped_zoom(out, transform.scale), 0.0, 1.0)
    return np.ascontiguousarray(out)


def augment(sample, rng, transform=None):
    """Apply one random geometric transform identically to every modality."""
    h, w = sample.size
    if transform is None:
        transform = draw_transform(rng, square=(h == w))
    if transform == IDENTITY:
        return sample
    modalities = collections.OrderedDict(
        (name, apply_transform(img[0, 0], transform)[None, None])
        for name, img in sample.modalities.items())
    return PhantomSample(sample.sample_id, modalities)


def save_pgm(path, t):
    """Write a (1, 1, h, w) tensor with values in [0, 1] as a binary 8-bit graymap."""
    shape = Shape4.of(t)
    if shape.n != 1 or shape.c != 1:
        raise ShapeError("a graymap holds one single-channel image, got %s" % (t.shape,))
    if np.any(t < 0) or np.any(t > 1):
        raise ParameterError("graymap values must lie in [0, 1]")
    pixels = np.floor(np.asarray(t[0, 0], dtype=np.float64) * defaults.PGM_MAXVAL + 0.5)
    header = ('P5\n%d %d\n%d\n' % (shape.w, shape.h, defaults.PGM_MAXVAL)).encode('ascii')
    with open(path, 'wb') as fp:
        fp.write(header)
        fp.write(pixels.astype(np.uint8).tobytes())


def _header_tokens(raw, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ParseError("truncated graymap header", pos)
        if raw[pos:pos + 1] == b'#':
            end = raw.find(b'\n', pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b'#':
            pos += 1
        tokens.append((raw[start:pos], start))
    return tokens, pos


def load_pgm(path):
    """Read a binary "P5" graymap with maxval 255 as a (1, 1, h, w) tensor in [0, 1]."""
    with open(path, 'rb') as fp:
        raw = fp.read()
    tokens, pos = _header_tokens(raw, 4)
    magic, magic_at = tokens[0]
    if magic != b'P5':
        raise ParseError("%s: not a binary graymap (magic %r)" % (path, magic), magic_at)
    values = []
    for token, at in tokens[1:]:
        if not token.isdigit():
            raise ParseError("%s: bad header field %r" % (path, token), at)
        values.append(int(token))
    w, h, maxval = values
    if w < 1 or h < 1:
        raise ParseError("%s: empty image %dx%d" % (path, w, h), tokens[1][1])
    if maxval != defaults.PGM_MAXVAL:
        raise ParseError("%s: maxval %d, only %d is supported"
                         % (path, maxval, defaults.PGM_MAXVAL), tokens[3][1])
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError("%s: missing separator before pixel data" % path, pos)
    start = pos + 1
    payload = raw[start:start + w * h]
    if len(payload) < w * h:
        raise ParseError("%s: truncated pixel data, %d of %d bytes"
                         % (path, len(payload), w * h), start + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (pixels.astype(np.float64) / defaults.PGM_MAXVAL)[None, None]


def pad_to_multiple(t, factor):
    """Zero-pad height and width symmetrically up to the next multiple of ``factor``.

    The extra row/column of an odd padding goes to the bottom/right.

    Returns
    -------
    (numpy.ndarray, CropRecord)

    """
    shape = Shape4.of(t)
    ph = -shape.h % factor
    pw = -shape.w % factor
    record = CropRecord(ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    return uncrop(t, record), record


def uncrop(t, record):
    """Zero-pad ``t`` by ``record``; the adjoint of ``crop_back``."""
    if not any(record):
        return t
    return np.pad(t, ((0, 0), (0, 0), (record.top, record.bottom), (record.left, record.right)))


def crop_back(t, record):
    """Undo ``pad_to_multiple``."""
    h, w = t.shape[2:]
    return t[:, :, record.top:h - record.bottom, record.left:w - record.right]


class DatasetManifest(object):
    """Index of a dataset directory."""

    def __init__(self, root, sample_ids, size, seed=None, modalities=defaults.MODALITIES):
        self.root = root
        self.sample_ids = list(sample_ids)
        self.size = tuple(size)
        self.seed = seed
        self.modalities = tuple(modalities)

    def path(self, sample_id, modality):
        return os.path.join(self.root, sample_id, modality + defaults.PGM_SUFFIX)

    @property
    def files(self):
        return collections.OrderedDict(
            (sid, [self.path(sid, m) for m in self.modalities]) for sid in self.sample_ids)


def write_manifest(manifest):
    lines = []
    if manifest.seed is not None:
        lines.append('# seed %d' % manifest.seed)
    h, w = manifest.size
    lines.extend('%s\t%d\t%d' % (sid, h, w) for sid in manifest.sample_ids)
    with open(os.path.join(manifest.root, defaults.MANIFEST_NAME), 'w') as fp:
        fp.write('\n'.join(lines) + '\n')


def read_manifest(root):
    """Parse ``manifest.txt`` and check that every listed file exists."""
    path = os.path.join(root, defaults.MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError("no %s in %s" % (defaults.MANIFEST_NAME, root))
    with open(path, 'rb') as fp:
        raw = fp.read()
    ids, sizes, seed, offset = [], set(), None, 0
    for line in raw.splitlines(True):
        text = line.decode('utf-8').strip()
        at, offset = offset, offset + len(line)
        if not text:
            continue
        if text.startswith('#'):
            parts = text[1:].split()
            if len(parts) == 2 and parts[0] == 'seed' and parts[1].lstrip('-').isdigit():
                seed = int(parts[1])
            continue
        fields = text.split('\t')
        if len(fields) != 3 or not fields[1].isdigit() or not fields[2].isdigit():
            raise ParseError("%s: expected id<TAB>h<TAB>w, got %r" % (path, text), at)
        ids.append(fields[0])
        sizes.add((int(fields[1]), int(fields[2])))
    if not ids:
        raise DataError("manifest %s lists no samples" % path)
    if len(sizes) != 1:
        raise ParseError("%s: samples differ in size: %s" % (path, sorted(sizes)), 0)
    manifest = DatasetManifest(root, ids, sizes.pop(), seed)
    for sid, files in manifest.files.items():
        for f in files:
            if not os.path.exists(f):
                raise DataError("missing file %s listed by sample %s" % (f, sid))
    return manifest


def write_dataset(root, count, h, w, seed=defaults.SEED):
    """Generate ``count`` phantoms under ``root`` and write their manifest."""
    if count < 1:
        raise ParameterError("count must be at least 1, got %d" % count)
    ids = ['s%04d' % i for i in range(count)]
    manifest = DatasetManifest(root, ids, (h, w), seed)
    for i, sid in enumerate(ids):
        sample = generate_phantom(derive_seed(seed, i), h, w, sample_id=sid)
        os.makedirs(os.path.join(root, sid), exist_ok=True)
        for modality, image in sample.modalities.items():
            save_pgm(manifest.path(sid, modality), image)
    write_manifest(manifest)
    logger.info("Wrote %d phantoms of %dx%d to %s", count, h, w, root)
    return manifest


class Dataset(object):
    """Samples of a manifest, loaded into memory in manifest order."""

    def __init__(self, manifest, samples):
        self.manifest = manifest
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        ids = [s.sample_id for s in samples]
        return cls(DatasetManifest(None, ids, samples[0].size), samples)

    def subset(self, sample_ids):
        wanted = set(sample_ids)
        return Dataset(self.manifest, [s for s in self.samples if s.sample_id in wanted])


def load_dataset(root):
    manifest = read_manifest(root)
    samples = []
    for sid in manifest.sample_ids:
        modalities = collections.OrderedDict(
            (m, load_pgm(manifest.path(sid, m))) for m in manifest.modalities)
        samples.append(PhantomSample(sid, modalities))
    logger.debug("Loaded %d samples from %s", len(samples), root)
    return Dataset(manifest, samples)


def split_ids(sample_ids, fraction=defaults.TRAIN_FRACTION):
    """First ``floor(fraction * M)`` ids (at least one) train, the rest test."""
    if not 0 < fraction <= 1:
        raise ParameterError("train fraction must lie in (0, 1], got %r" % fraction)
    sample_ids = list(sample_ids)
    cut = min(len(sample_ids), max(1, int(math.floor(fraction * len(sample_ids)))))
    return sample_ids[:cut], sample_ids[cut:]


def check_modalities(names, available=defaults.MODALITIES):
    for name in names:
        if name not in available:
            raise DataError("unknown modality %r (known: %s)" % (name, ', '.join(available)))


def batches(dataset, input_mods, output_mods, batch_size, epoch_seed,
            augment_flag=False, shuffle=True, dtype=defaults.DTYPE):
    """Yield ``(inputs, targets)`` mini-batches for one epoch.

    Each side is a list with one (B, 1, h, w) tensor per requested modality.
    Order comes from a permutation seeded by ``epoch_seed``; the last batch
    may be smaller.
    """
    check_modalities(input_mods)
    check_modalities(output_mods)
    if batch_size < 1:
        raise ParameterError("batch size must be at least 1, got %d" % batch_size)
    dtype = resolve_dtype(dtype)
    rng = RngStream(epoch_seed)
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    samples = dataset.samples
    if augment_flag and samples and samples[0].size[0] != samples[0].size[1]:
        logger.warning("Images are %dx%d; augmentation rotates by 0 or 180 degrees only",
                       *samples[0].size)
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if augment_flag:
            chunk = [augment(s, rng) for s in chunk]
        inputs = [stack_batch([s[m] for s in chunk]).astype(dtype) for m in input_mods]
        targets = [stack_batch([s[m] for s in chunk]).astype(dtype) for m in output_mods]
        yield inputs, targets


def epoch_seed(seed, epoch):
    """Seed of the shuffling/augmentation stream of one epoch."""
    return derive_seed(seed, epoch)
