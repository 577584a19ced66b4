''' Local Attention Pooling layers.

A LAP layer scores every pixel of its input feature map with h concept heads,
aggregates the head probabilities into a single score map, normalizes the
scores inside every pooling window around the window's best pixel and returns
the score-weighted average of the features under each window.
'''

import logging
from collections import namedtuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import config
from .exceptions import LapConfigError, LapNumericError, GeometryError

logger = logging.getLogger(__name__)

AGGREGATIONS = ('max', 'sum', 'linear')

# per_concept: N x h x H x W head probabilities, aggregated: N x 1 x H x W score map.
ConceptMaps = namedtuple('ConceptMaps', ['per_concept', 'aggregated'])


class KernelSpec(object):

    ''' Sliding-window geometry of a LAP: kernel size, stride and symmetric
    zero padding. Output position (i', j') reads the window whose top-left
    corner is (i' * stride_h - padding, j' * stride_w - padding). '''

    def __init__(self, kernel_h, kernel_w=None, stride_h=None, stride_w=None, padding=0):
        kernel_w = kernel_h if kernel_w is None else kernel_w
        stride_h = kernel_h if stride_h is None else stride_h
        stride_w = kernel_w if stride_w is None else stride_w
        if min(kernel_h, kernel_w) < 1 or min(stride_h, stride_w) < 1 or padding < 0:
            raise GeometryError('Invalid kernel geometry: kernel (%d, %d), stride (%d, %d), padding %d' % (
                kernel_h, kernel_w, stride_h, stride_w, padding))
        self.kernel_h, self.kernel_w = int(kernel_h), int(kernel_w)
        self.stride_h, self.stride_w = int(stride_h), int(stride_w)
        self.padding = int(padding)

    @classmethod
    def from_args(cls, kernel_size, stride=None, padding=0):
        ''' Build from torch-style int-or-pair arguments. '''
        kh, kw = _pair(kernel_size)
        sh, sw = _pair(stride) if stride is not None else (kh, kw)
        p = _pair(padding)
        if p[0] != p[1]:
            raise GeometryError('Asymmetric padding %s is not supported' % (p,))
        return cls(kh, kw, sh, sw, p[0])

    def output_size(self, h, w):
        ''' Standard sliding-window arithmetic; raises when the kernel does not
        fit the padded input. '''
        ph, pw = h + 2 * self.padding, w + 2 * self.padding
        if ph < self.kernel_h or pw < self.kernel_w:
            raise GeometryError('Kernel (%d, %d) larger than padded input (%d, %d)' % (
                self.kernel_h, self.kernel_w, ph, pw))
        return ((ph - self.kernel_h) // self.stride_h + 1,
                (pw - self.kernel_w) // self.stride_w + 1)

    def corner(self, i, j):
        return (i * self.stride_h - self.padding, j * self.stride_w - self.padding)

    def to_dict(self):
        return {'kernel_h': self.kernel_h, 'kernel_w': self.kernel_w,
                'stride_h': self.stride_h, 'stride_w': self.stride_w,
                'padding': self.padding}

    @classmethod
    def from_dict(cls, d):
        return cls(d['kernel_h'], d['kernel_w'], d['stride_h'], d['stride_w'], d.get('padding', 0))

    def __eq__(self, other):
        return isinstance(other, KernelSpec) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'KernelSpec(%d, %d, stride=(%d, %d), padding=%d)' % (
            self.kernel_h, self.kernel_w, self.stride_h, self.stride_w, self.padding)


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class LapConfig(object):

    ''' Per-LAP hyper-parameters. Loss settings (per-head MinAR/MaxAR/IAR)
    are optional; when absent the trainer falls back to the global ones. '''

    def __init__(self, kernel=None, n_heads=1, hidden_channels=None, aggregation=None,
                 alpha_init=None, epsilon=None, use_selector=None, heads=None):
        self.kernel = kernel if kernel is not None else KernelSpec(config.LAP_KERNEL_SIZE, stride_h=config.LAP_STRIDE)
        self.n_heads = int(n_heads)
        self.hidden_channels = hidden_channels
        self.aggregation = aggregation if aggregation is not None else config.LAP_AGGREGATION
        self.alpha_init = config.LAP_ALPHA_INIT if alpha_init is None else float(alpha_init)
        self.epsilon = config.LAP_EPSILON if epsilon is None else float(epsilon)
        self.use_selector = config.LAP_USE_SELECTOR if use_selector is None else bool(use_selector)
        self.heads = heads
        self.validate()

    def validate(self):
        bad = []
        if self.n_heads < 1:
            bad.append('n_heads')
        if self.aggregation not in AGGREGATIONS:
            bad.append('aggregation')
        if not self.epsilon > 0:
            bad.append('epsilon')
        if self.hidden_channels is not None and int(self.hidden_channels) < 1:
            bad.append('hidden_channels')
        if bad:
            raise LapConfigError('Invalid LAP settings', bad)

    def with_kernel(self, kernel):
        d = self.to_dict()
        d['kernel'] = kernel.to_dict() if kernel is not None else None
        return LapConfig.from_dict(d)

    def to_dict(self):
        return {'kernel': self.kernel.to_dict() if self.kernel is not None else None,
                'n_heads': self.n_heads, 'hidden_channels': self.hidden_channels,
                'aggregation': self.aggregation, 'alpha_init': self.alpha_init,
                'epsilon': self.epsilon, 'use_selector': self.use_selector,
                'heads': self.heads}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kernel = d.pop('kernel', None)
        return cls(kernel=KernelSpec.from_dict(kernel) if kernel else None, **d)


class ConceptScorer(nn.Module):

    ''' Pixel-wise concept scoring S_C: a stack of 1x1 convolutions mapping a
    C-dim pixel feature to h logits. '''

    def __init__(self, in_channels, n_heads=1, hidden_channels=None):
        super(ConceptScorer, self).__init__()
        self.in_channels = in_channels
        self.n_heads = n_heads
        if hidden_channels:
            self.net = nn.Sequential(
                nn.Conv2d(in_channels, hidden_channels, 1),
                nn.ReLU(inplace=True),
                nn.Conv2d(hidden_channels, n_heads, 1))
        else:
            self.net = nn.Sequential(nn.Conv2d(in_channels, n_heads, 1))

    def zero_(self):
        ''' Zero every weight and bias: all heads then output sigma(0) = 0.5. '''
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, x):
        return self.net(x)


class ScoringModule(nn.Module):

    ''' Trainable scoring parameters of one LAP: concept scorer, aggregation,
    sharpening alpha (stored unconstrained, squared when used) and the fixed
    epsilon. '''

    def __init__(self, in_channels, n_heads=1, hidden_channels=None, aggregation='max',
                 alpha_init=config.LAP_ALPHA_INIT, epsilon=config.LAP_EPSILON):
        super(ScoringModule, self).__init__()
        if aggregation not in AGGREGATIONS:
            raise LapConfigError('Unknown aggregation %r' % aggregation, ['aggregation'])
        if not epsilon > 0:
            raise LapConfigError('epsilon must be positive', ['epsilon'])
        self.in_channels = in_channels
        self.n_heads = n_heads
        self.aggregation = aggregation
        self.scorer = ConceptScorer(in_channels, n_heads, hidden_channels)
        if aggregation == 'linear':
            self.aggregator = nn.Conv2d(n_heads, 1, 1)
            with torch.no_grad():
                self.aggregator.weight.fill_(1.0 / n_heads)
                self.aggregator.bias.zero_()
        else:
            self.aggregator = None
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))
        self.epsilon = float(epsilon)

    @classmethod
    def from_config(cls, in_channels, lap_config):
        return cls(in_channels, lap_config.n_heads, lap_config.hidden_channels,
                   lap_config.aggregation, lap_config.alpha_init, lap_config.epsilon)

    def aggregate(self, per_concept):
        ''' A: R^h -> R over head probabilities. The linear variant is passed
        through a sigmoid so the score stays a probability. '''
        if self.aggregation == 'sum':
            return per_concept.sum(1, keepdim=True)
        if self.aggregation == 'linear':
            return torch.sigmoid(self.aggregator(per_concept))
        return per_concept.max(1, keepdim=True)[0]

    def forward(self, x):
        return score_pixels(x, self)


def _check_features(x, in_channels=None):
    if x.dim() != 4:
        raise GeometryError('Expected an N x C x H x W feature map, got shape %s' % (tuple(x.shape),))
    if in_channels is not None and x.shape[1] != in_channels:
        raise LapConfigError('Feature map has %d channels but the scorer expects %d' % (
            x.shape[1], in_channels), ['in_channels'])
    if not torch.isfinite(x).all():
        raise LapNumericError('Feature map contains non-finite activations')


def _batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


def score_pixels(x, params):
    ''' Concept maps of a feature map: per_concept = sigma(S_C(x)) for every
    pixel, aggregated = A(per_concept). Accepts C x H x W or N x C x H x W. '''
    x, single = _batched(x)
    _check_features(x, params.in_channels)
    per_concept = torch.sigmoid(params.scorer(x))
    aggregated = params.aggregate(per_concept)
    if single:
        return ConceptMaps(per_concept[0], aggregated[0])
    return ConceptMaps(per_concept, aggregated)


def normalize_window(v, alpha, epsilon=config.LAP_EPSILON, dim=-1):
    ''' Gaussian local normalization of the scores of one window (or of a
    batch of windows laid out along `dim`):
        exp(-alpha^2 (max(v) - v)^2) * v + epsilon
    The max is taken over the window only. '''
    v = torch.as_tensor(v)
    peak = v.max(dim, keepdim=True)[0]
    return torch.exp(-(alpha ** 2) * (peak - v) ** 2) * v + epsilon


def lap_pool(x, scores, kernel, alpha, epsilon=config.LAP_EPSILON):
    ''' Windowed weighted-average pooling of x with locally normalized scores.
    Padded pixels carry zero features and zero score, so they only get the
    epsilon weight.
    Args:
        x: N x C x H x W (or C x H x W) features.
        scores: N x 1 x H x W, N x H x W (or H x W when x is unbatched)
            non-negative scores.
        kernel: KernelSpec.
        alpha, epsilon: normalization parameters.
    '''
    x, single = _batched(x)
    if single and scores.dim() == 2:
        scores = scores.unsqueeze(0)
    if scores.dim() == 3:
        scores = scores.unsqueeze(1)
    if tuple(scores.shape[-2:]) != tuple(x.shape[-2:]) or scores.shape[0] != x.shape[0]:
        raise GeometryError('Score map shape %s does not match feature map shape %s' % (
            tuple(scores.shape), tuple(x.shape)))
    n, c, h, w = x.shape
    out_h, out_w = kernel.output_size(h, w)
    size = (kernel.kernel_h, kernel.kernel_w)
    stride = (kernel.stride_h, kernel.stride_w)
    pad = (kernel.padding, kernel.padding)

    # features: n x c x k x L, weights: n x k x L
    cols = F.unfold(x, size, padding=pad, stride=stride).view(n, c, size[0] * size[1], -1)
    windows = F.unfold(scores, size, padding=pad, stride=stride)
    weights = normalize_window(windows, alpha, epsilon, dim=1)
    pooled = (cols * weights.unsqueeze(1)).sum(2) / weights.sum(1, keepdim=True)
    pooled = pooled.view(n, c, out_h, out_w)
    return pooled[0] if single else pooled


def lap_forward(x, lap_config, params):
    ''' score_pixels followed by lap_pool on the aggregated map. Returns the
    pooled features and the concept maps they were pooled with. '''
    maps = score_pixels(x, params)
    scores = maps.aggregated
    pooled = lap_pool(x, scores, lap_config.kernel, params.alpha, params.epsilon)
    return pooled, maps


def adaptive_bounds(size, out):
    ''' Region boundaries used by adaptive average pooling. '''
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_lap_pool(x, scores, out_h, out_w, alpha, epsilon=config.LAP_EPSILON):
    ''' LAP reduction over the (possibly unequal) regions of adaptive pooling. '''
    x, single = _batched(x)
    if single and scores.dim() == 2:
        scores = scores.unsqueeze(0)
    if scores.dim() == 3:
        scores = scores.unsqueeze(1)
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise GeometryError('Adaptive output (%d, %d) exceeds input (%d, %d)' % (out_h, out_w, h, w))
    rows = []
    for r0, r1 in adaptive_bounds(h, out_h):
        row = []
        for c0, c1 in adaptive_bounds(w, out_w):
            feats = x[:, :, r0:r1, c0:c1].flatten(2)
            weights = normalize_window(scores[:, :, r0:r1, c0:c1].flatten(2), alpha, epsilon, dim=-1)
            row.append((feats * weights).sum(-1) / weights.sum(-1))
        rows.append(torch.stack(row, -1))
    pooled = torch.stack(rows, -2)
    return pooled[0] if single else pooled


def adaptive_lap(x, out_h, out_w, params):
    ''' Adaptive LAP: score, then reduce each adaptive-pooling region with the
    region-local normalization. '''
    maps = score_pixels(x, params)
    pooled = adaptive_lap_pool(x, maps.aggregated, out_h, out_w, params.alpha, params.epsilon)
    return pooled, maps


class _LapBase(nn.Module):

    def __init__(self, in_channels, lap_config):
        super(_LapBase, self).__init__()
        self.in_channels = in_channels
        self.lap_config = lap_config
        self.scoring = ScoringModule.from_config(in_channels, lap_config)
        if lap_config.use_selector:
            # Discriminative scoring module: same architecture, fed detached input.
            self.selector = ConceptScorer(in_channels, lap_config.n_heads, lap_config.hidden_channels)
        else:
            self.selector = None
        self.concept_maps = None
        self.selector_maps = None
        self.input_size = None

    @property
    def n_heads(self):
        return self.lap_config.n_heads

    def _record(self, x, maps):
        self.input_size = tuple(x.shape[-2:])
        self.concept_maps = maps
        if self.selector is not None and self.training:
            self.selector_maps = torch.sigmoid(self.selector(x.detach()))
        else:
            self.selector_maps = None

    def clear(self):
        self.concept_maps = None
        self.selector_maps = None


class LocalAttentionPool2d(_LapBase):

    ''' Drop-in replacement for a 2d pooling layer. forward() returns the
    pooled features only; the concept maps of the last call stay on the
    module (concept_maps, selector_maps) for losses and interpretation. '''

    @property
    def kernel(self):
        return self.lap_config.kernel

    def forward_with_maps(self, x):
        return lap_forward(x, self.lap_config, self.scoring)

    def forward(self, x):
        pooled, maps = self.forward_with_maps(x)
        self._record(x, maps)
        return pooled

    def extra_repr(self):
        return 'in_channels=%d, heads=%d, %r' % (self.in_channels, self.n_heads, self.kernel)


class AdaptiveLocalAttentionPool2d(_LapBase):

    ''' Drop-in replacement for adaptive average/max pooling. '''

    def __init__(self, in_channels, output_size, lap_config):
        super(AdaptiveLocalAttentionPool2d, self).__init__(in_channels, lap_config)
        self.output_size = _pair(output_size)

    @property
    def kernel(self):
        ''' Equivalent window geometry for the last input seen. Exact when the
        input divides evenly into the output, nearest otherwise. '''
        if self.input_size is None:
            return None
        (h, w), (oh, ow) = self.input_size, self.output_size
        kh, kw = -(-h // oh), -(-w // ow)
        return KernelSpec(kh, kw, max(h // oh, 1), max(w // ow, 1), 0)

    def forward_with_maps(self, x):
        return adaptive_lap(x, self.output_size[0], self.output_size[1], self.scoring)

    def forward(self, x):
        pooled, maps = self.forward_with_maps(x)
        self._record(x, maps)
        return pooled

    def extra_repr(self):
        return 'in_channels=%d, heads=%d, output_size=%s' % (self.in_channels, self.n_heads, self.output_size)


def lap_modules(model):
    ''' All LAP layers of a model in forward (registration) order. '''
    return [m for m in model.modules() if isinstance(m, _LapBase)]


def is_lap(module):
    return isinstance(module, _LapBase)
