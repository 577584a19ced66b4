''' Deterministic synthetic "spot detection" data.

Every image is a flat background with Gaussian noise and a few square
distractors; positive images also contain one bright disc, the concept. Each
sample comes with its label, concept set, exact disc mask and the tight
bounding box of that mask. Annotation files use a small tab-separated format:

    # image_size <H> <W>
    <sample_id>\t<concepts>\t<boxes>

where <concepts> is a comma list of concept indices or "-", and <boxes> is a
space-separated list of "<concept>:<x>,<y>,<w>,<h>" or "-".
'''

import logging
import os

import numpy as np
import regex
import simplejson as json
import torch
from torch.utils.data import Dataset

from . import config
from .exceptions import LapParseError, SynthSpecError
from .losses import ConceptAnnotation

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
MANIFEST_VERSION = 1

_CONCEPTS = regex.compile(r'-|\d+(?:,\d+)*')
_BOX = regex.compile(r'(\d+):(\d+),(\d+),(\d+),(\d+)')
_HEADER = regex.compile(r'#\s*image_size\s+(\d+)\s+(\d+)\s*')


class SynthSpec(object):

    ''' Parameters of the synthetic dataset. The seed fully determines the
    generated bytes. '''

    def __init__(self, image_size=64, n_train=2000, n_val=250, n_test=250, positive_fraction=0.5,
                 radius_min=4, radius_max=8, background=0.3, contrast=0.4, noise_std=0.05,
                 n_distractors=3, distractor_size=6, distractor_contrast=0.25, seed=0):
        self.image_size = int(image_size)
        self.n_train, self.n_val, self.n_test = int(n_train), int(n_val), int(n_test)
        self.positive_fraction = float(positive_fraction)
        self.radius_min, self.radius_max = int(radius_min), int(radius_max)
        self.background = float(background)
        self.contrast = float(contrast)
        self.noise_std = float(noise_std)
        self.n_distractors = int(n_distractors)
        self.distractor_size = int(distractor_size)
        self.distractor_contrast = float(distractor_contrast)
        self.seed = int(seed)
        self.validate()

    def validate(self):
        if self.radius_min < 1 or self.radius_max < self.radius_min:
            raise SynthSpecError('Invalid radius range [%d, %d]' % (self.radius_min, self.radius_max))
        if 2 * self.radius_max + 1 > self.image_size:
            raise SynthSpecError('A disc of radius %d does not fit a %d-pixel image' % (self.radius_max, self.image_size))
        if self.n_distractors and not 1 <= self.distractor_size <= self.image_size:
            raise SynthSpecError('Distractor size %d does not fit a %d-pixel image' % (self.distractor_size, self.image_size))
        if not 0 <= self.positive_fraction <= 1:
            raise SynthSpecError('positive_fraction must lie in [0, 1]')
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.noise_std < 0:
            raise SynthSpecError('Sample counts and noise must be non-negative')
        return self

    def split_sizes(self):
        return {'train': self.n_train, 'val': self.n_val, 'test': self.n_test}

    def to_dict(self):
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_config(cls, cfg):
        d = dict((k, v) for k, v in cfg['data'].items() if k != 'root')
        return cls(seed=cfg['seed'], **d)


class SynthSplit(object):

    ''' One split: images N x 1 x S x S, masks N x S x S, labels N and one
    ConceptAnnotation per sample. '''

    def __init__(self, name, images, masks, labels, annotations):
        self.name = name
        self.images = images
        self.masks = masks
        self.labels = labels
        self.annotations = annotations

    def __len__(self):
        return len(self.labels)

    @property
    def sample_ids(self):
        return [a.sample_id for a in self.annotations]

    def dataset(self):
        return SplitDataset(self)


class SplitDataset(Dataset):

    ''' torch view of a split yielding (image, label, index). '''

    def __init__(self, split):
        self.split = split
        self.images = torch.from_numpy(split.images)
        self.labels = torch.from_numpy(split.labels)

    def __len__(self):
        return len(self.split)

    def __getitem__(self, i):
        return self.images[i], self.labels[i], i


def _disc_sample(spec, rng, positive):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    image = spec.background + spec.noise_std * rng.standard_normal((s, s))
    mask = np.zeros((s, s), dtype=bool)
    if positive:
        r = int(rng.integers(spec.radius_min, spec.radius_max + 1))
        cy, cx = rng.integers(r, s - r, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        image[mask] += spec.contrast
    d = spec.distractor_size
    for _ in range(spec.n_distractors):
        # squares never touch the disc
        for _attempt in range(20):
            y0, x0 = rng.integers(0, s - d + 1, size=2)
            if not mask[max(y0 - 1, 0):y0 + d + 1, max(x0 - 1, 0):x0 + d + 1].any():
                image[y0:y0 + d, x0:x0 + d] += spec.distractor_contrast
                break
    return image.astype(np.float32), mask


def tight_box(mask):
    ''' (x, y, w, h) hull of a boolean mask, or None when it is empty. '''
    rows = np.where(mask.any(1))[0]
    cols = np.where(mask.any(0))[0]
    if not len(rows):
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def generate_split(spec, name):
    code = SPLITS.index(name)
    n = spec.split_sizes()[name]
    n_pos = int(round(n * spec.positive_fraction))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    labels = np.random.default_rng([spec.seed, code]).permutation(labels)
    s = spec.image_size
    images = np.zeros((n, 1, s, s), dtype=np.float32)
    masks = np.zeros((n, s, s), dtype=bool)
    annotations = []
    for i in range(n):
        # per-sample seeds keep samples independent of generation order
        rng = np.random.default_rng([spec.seed, code, i])
        images[i, 0], masks[i] = _disc_sample(spec, rng, labels[i] == 1)
        sid = '%s-%06d' % (name, i)
        if labels[i] == 1:
            annotations.append(ConceptAnnotation(sid, [0], {0: [tight_box(masks[i])]}))
        else:
            annotations.append(ConceptAnnotation(sid, []))
    logger.info('Generated %s split: %d samples, %d positive' % (name, n, n_pos))
    return SynthSplit(name, images, masks, labels, annotations)


def generate(spec):
    ''' All three splits as a dict name -> SynthSplit. '''
    spec.validate()
    return dict((name, generate_split(spec, name)) for name in SPLITS)


def save_dataset(splits, spec, root):
    ''' Write images/masks as LAPM containers, annotations as text and a JSON
    manifest with the spec and labels. '''
    from .export import write_lapm
    if not os.path.exists(root):
        os.makedirs(root)
    manifest = {'version': MANIFEST_VERSION, 'spec': spec.to_dict(), 'splits': {}}
    for name, split in splits.items():
        write_lapm(os.path.join(root, '%s_images.lapm' % name), split.images)
        write_lapm(os.path.join(root, '%s_masks.lapm' % name), split.masks.astype(np.float32))
        write_annotations(os.path.join(root, '%s_annotations.txt' % name), split.annotations,
                          (spec.image_size, spec.image_size))
        manifest['splits'][name] = {'n': len(split), 'labels': [int(v) for v in split.labels]}
    with open(os.path.join(root, 'manifest.json'), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info('Saved dataset to %s' % root)


def load_dataset(root):
    ''' (splits, spec) from a directory written by save_dataset. '''
    from .export import read_lapm
    path = os.path.join(root, 'manifest.json')
    if not os.path.exists(path):
        raise SynthSpecError('No dataset manifest at %s' % path)
    with open(path) as f:
        manifest = json.load(f)
    spec = SynthSpec.from_dict(manifest['spec'])
    splits = {}
    for name, info in sorted(manifest['splits'].items()):
        images = read_lapm(os.path.join(root, '%s_images.lapm' % name))
        masks = read_lapm(os.path.join(root, '%s_masks.lapm' % name)) > 0.5
        annotations = load_annotations(os.path.join(root, '%s_annotations.txt' % name))
        labels = np.asarray(info['labels'], dtype=np.int64)
        splits[name] = SynthSplit(name, images, masks, labels, annotations)
    return splits, spec


def write_annotations(path, annotations, image_size=None):
    lines = []
    if image_size is not None:
        lines.append('# image_size %d %d' % tuple(image_size))
    for a in annotations:
        concepts = ','.join(str(c) for c in sorted(a.concepts_present)) or '-'
        boxes = ' '.join('%d:%d,%d,%d,%d' % ((c,) + tuple(b))
                         for c in sorted(a.boxes) for b in a.boxes[c]) or '-'
        lines.append('%s\t%s\t%s' % (a.sample_id, concepts, boxes))
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + ('\n' if lines else ''))


def _parse_line(line, number, image_size):
    fields = line.split('\t')
    if len(fields) != 3:
        raise LapParseError('expected 3 tab-separated fields, found %d' % len(fields), number, 'line')
    sample_id, concepts, boxes = [f.strip() for f in fields]
    if not sample_id:
        raise LapParseError('empty sample id', number, 'sample_id')
    if not _CONCEPTS.fullmatch(concepts):
        raise LapParseError('bad concept list %r' % concepts, number, 'concepts')
    present = [] if concepts == '-' else [int(c) for c in concepts.split(',')]
    parsed = {}
    if boxes != '-':
        for token in boxes.split():
            m = _BOX.fullmatch(token)
            if m is None:
                raise LapParseError('bad box %r' % token, number, 'boxes')
            c, x, y, w, h = [int(v) for v in m.groups()]
            if image_size is not None and (x + w > image_size[1] or y + h > image_size[0]):
                raise LapParseError('box %s exceeds image bounds %s' % ((x, y, w, h), tuple(image_size)),
                                    number, 'boxes')
            parsed.setdefault(c, []).append((x, y, w, h))
    return ConceptAnnotation(sample_id, present, parsed)


def load_annotations(path, image_size=None):
    ''' Read an annotation file into a list of ConceptAnnotation.
    Args:
        path: the file.
        image_size: optional (H, W) to check boxes against; a "# image_size"
            header in the file is used when this is None.
    '''
    records = []
    with open(path) as f:
        for number, raw in enumerate(f, 1):
            line = raw.rstrip('\n')
            if not line.strip():
                continue
            if line.startswith('#'):
                m = _HEADER.fullmatch(line)
                if m is not None and image_size is None:
                    image_size = (int(m.group(1)), int(m.group(2)))
                continue
            try:
                records.append(_parse_line(line, number, image_size))
            except LapParseError as e:
                if not config.IGNORE_BAD_LINES:
                    raise
                if not config.SILENT_ERRORS:
                    logger.warning('Skipping %s: %s' % (path, e))
    return records
