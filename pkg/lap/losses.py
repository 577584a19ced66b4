''' Knowledge-injection objectives for LAP concept heads: the weakly supervised
concept-discrimination loss and its discriminative selector, the concordance
loss between consecutive LAPs, box supervision and the weighted total. '''

import logging
import math

import torch
import torch.nn.functional as F

from . import config
from .exceptions import LapArgumentError
from .pooling import ConceptMaps

logger = logging.getLogger(__name__)


class ConceptAnnotation(object):

    ''' Concepts present in one sample, plus optional (x, y, w, h) boxes in
    input-pixel coordinates keyed by concept index. '''

    def __init__(self, sample_id, concepts_present=(), boxes=None):
        self.sample_id = str(sample_id)
        self.concepts_present = frozenset(int(c) for c in concepts_present)
        self.boxes = {}
        for c, bs in (boxes or {}).items():
            self.boxes[int(c)] = [tuple(int(v) for v in b) for b in bs]

    def validate(self, n_heads=None, image_size=None):
        ''' Check concept indices against the head count and boxes against
        the image bounds (height, width). '''
        concepts = set(self.concepts_present) | set(self.boxes)
        if n_heads is not None and any(c < 0 or c >= n_heads for c in concepts):
            raise LapArgumentError('Sample %s: concept index out of [0, %d)' % (self.sample_id, n_heads))
        if image_size is not None:
            height, width = image_size
            for c, bs in self.boxes.items():
                for (x, y, w, h) in bs:
                    if x < 0 or y < 0 or w < 0 or h < 0 or x + w > width or y + h > height:
                        raise LapArgumentError('Sample %s: box %s of concept %d exceeds image bounds %s' % (
                            self.sample_id, (x, y, w, h), c, (height, width)))
        return self

    def __eq__(self, other):
        return (isinstance(other, ConceptAnnotation) and self.sample_id == other.sample_id
                and self.concepts_present == other.concepts_present and self.boxes == other.boxes)

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'ConceptAnnotation(%r, %s, %s)' % (self.sample_id, sorted(self.concepts_present), self.boxes)


class DiscLossConfig(object):

    ''' Ratios of one concept head. Any of min_ar / max_ar / iar may be None,
    which switches the corresponding term off. '''

    def __init__(self, min_ar=None, max_ar=None, iar=None, concordance_t=None, weights=None):
        self.min_ar = min_ar
        self.max_ar = max_ar
        self.iar = iar
        self.concordance_t = config.CONCORDANCE_T if concordance_t is None else concordance_t
        self.weights = weights if weights is not None else LossWeights()
        bad = [k for k in ('min_ar', 'max_ar', 'iar')
               if getattr(self, k) is not None and not 0 < getattr(self, k) <= 1]
        if min_ar is not None and max_ar is not None and min_ar > max_ar:
            bad.append('min_ar')
        if not 0 < self.concordance_t < 1:
            bad.append('concordance_t')
        if bad:
            raise LapArgumentError('Invalid loss ratios: %s' % ', '.join(sorted(set(bad))))

    def counts(self, hw):
        ''' (k1, k2, k3) for a map of hw pixels; None for switched-off terms. '''
        k1 = _count(self.min_ar, hw) if self.min_ar is not None else None
        k2 = _count(1 - self.max_ar, hw) if self.max_ar is not None else None
        k3 = _count(self.iar, hw) if self.iar is not None else None
        return k1, k2, k3

    def to_dict(self):
        return {'min_ar': self.min_ar, 'max_ar': self.max_ar, 'iar': self.iar}


class LossWeights(object):

    ''' Linear-combination weights: task loss, each LAP's concept loss and each
    consecutive LAP pair's concordance loss. '''

    def __init__(self, task=config.TASK_WEIGHT, lap=config.LAP_WEIGHT, pair=config.PAIR_WEIGHT):
        for name, w in (('task', task), ('lap', lap), ('pair', pair)):
            if not (math.isfinite(w) and w >= 0):
                raise LapArgumentError('Loss weight %s must be finite and >= 0, got %r' % (name, w))
        self.task, self.lap, self.pair = float(task), float(lap), float(pair)


class LossConfig(object):

    ''' Everything the trainer needs to assemble the objective, read from the
    `losses` config section. '''

    def __init__(self, heads, supervision='weak', concordance_t=config.CONCORDANCE_T,
                 one_sided=False, weights=None, use_lap_loss=True, use_concordance=True):
        if supervision not in ('weak', 'full'):
            raise LapArgumentError("supervision must be 'weak' or 'full', got %r" % supervision)
        self.heads = heads
        self.supervision = supervision
        self.concordance_t = concordance_t
        self.one_sided = one_sided
        self.weights = weights if weights is not None else LossWeights()
        self.use_lap_loss = use_lap_loss
        self.use_concordance = use_concordance

    @classmethod
    def from_config(cls, section):
        weights = LossWeights(section['task_weight'], section['lap_weight'], section['pair_weight'])
        heads = [DiscLossConfig(h.get('min_ar'), h.get('max_ar'), h.get('iar'),
                                section['concordance_t'], weights)
                 for h in section['heads']]
        return cls(heads, section['supervision'], section['concordance_t'],
                   section['one_sided_concordance'], weights,
                   section['use_lap_loss'], section['use_concordance'])


def _count(ratio, hw):
    # rounding first keeps e.g. 0.1 * 30 from ceiling to 4
    return int(math.ceil(round(ratio * hw, 9)))


def _per_concept(maps):
    if isinstance(maps, ConceptMaps):
        maps = maps.per_concept
    if maps.dim() == 3:
        maps = maps.unsqueeze(0)
    return maps


def _clamped(p):
    return p.clamp(config.LOG_CLAMP, 1 - config.LOG_CLAMP)


def presence_matrix(annotations, n_samples, n_heads):
    ''' N x h boolean tensor of concept membership. Accepts ConceptAnnotations
    or an already-built boolean tensor. '''
    if torch.is_tensor(annotations):
        presence = annotations.bool()
    else:
        presence = torch.zeros(len(annotations), n_heads, dtype=torch.bool)
        for s, ann in enumerate(annotations):
            for c in ann.concepts_present:
                if c < 0 or c >= n_heads:
                    raise LapArgumentError('Concept index %d out of [0, %d)' % (c, n_heads))
                presence[s, c] = True
    if tuple(presence.shape) != (n_samples, n_heads):
        raise LapArgumentError('Annotations cover %s samples x heads, maps have (%d, %d)' % (
            tuple(presence.shape), n_samples, n_heads))
    return presence


def _head_configs(cfg, n_heads):
    if cfg is None:
        return [DiscLossConfig(config.MIN_AR, config.MAX_AR, config.IAR)] * n_heads
    if isinstance(cfg, DiscLossConfig):
        return [cfg] * n_heads
    cfg = list(cfg)
    if len(cfg) == 1:
        return cfg * n_heads
    if len(cfg) != n_heads:
        raise LapArgumentError('%d head configs given for %d heads' % (len(cfg), n_heads))
    return cfg


def _order(values, descending):
    # stable sort: ties resolve by row-major index
    return torch.sort(values, dim=-1, descending=descending, stable=True)[1]


def topk_pixels(grid, k, direction='highest'):
    ''' The k pixels of an H x W map with the highest (or lowest) values, as
    (i, j) tuples in rank order. Ties resolve by row-major index. '''
    grid = torch.as_tensor(grid)
    h, w = grid.shape
    if not 0 <= k <= h * w:
        raise LapArgumentError('k = %d outside [0, %d]' % (k, h * w))
    if direction not in ('highest', 'lowest'):
        raise LapArgumentError("direction must be 'highest' or 'lowest'")
    order = _order(grid.reshape(-1), direction == 'highest')[:k]
    return [(int(i) // w, int(i) % w) for i in order]


def _selected_log(probs, selection, k, highest, active):
    ''' ln(p) (active) or ln(1 - p) of the k pixels ranked by `selection`. '''
    idx = _order(selection, highest)[:, :k]
    p = _clamped(probs.gather(1, idx))
    return torch.log(p) if active else torch.log1p(-p)


def concept_discrimination_loss(concept_maps, selector_maps, annotations, cfg=None):
    ''' Weakly supervised concept-discrimination loss of one LAP.
    Args:
        concept_maps: ConceptMaps or N x h x H x W head probabilities.
        selector_maps: probabilities of the discriminative scoring module used
            to pick the top/bottom pixel sets, or None to pick them from the
            concept maps themselves.
        annotations: ConceptAnnotations (or an N x h boolean tensor).
        cfg: DiscLossConfig, or one per head.
    Concepts missing from the batch on either side skip that side's terms.
    '''
    probs = _per_concept(concept_maps)
    n, h, height, width = probs.shape
    if n == 0:
        raise LapArgumentError('Empty batch')
    presence = presence_matrix(annotations, n, h).to(probs.device)
    heads = _head_configs(cfg, h)
    hw = height * width
    probs = probs.flatten(2)
    if selector_maps is not None:
        selection = _per_concept(selector_maps).detach().flatten(2)
        if selection.shape != probs.shape:
            raise LapArgumentError('Selector maps %s do not match concept maps %s' % (
                tuple(selection.shape), tuple(probs.shape)))
    else:
        selection = probs.detach()

    total = probs.new_zeros(())
    for c, head in enumerate(heads):
        k1, k2, k3 = head.counts(hw)
        # heads the selector is never trained for rank by their own maps
        sel = selection if (head.min_ar or head.iar) else probs.detach()
        pos = presence[:, c]
        neg = ~pos
        if pos.any():
            if k1:
                total = total - 2 * _selected_log(probs[pos, c], sel[pos, c], k1, True, True).mean()
            if k2:
                total = total - _selected_log(probs[pos, c], sel[pos, c], k2, False, False).mean()
        elif k1 or k2:
            logger.debug('Concept %d has no positive samples in batch; skipping its positive terms' % c)
        if neg.any():
            if k3:
                total = total - _selected_log(probs[neg, c], sel[neg, c], k3, True, False).mean()
        elif k3:
            logger.debug('Concept %d has no negative samples in batch; skipping its inactive term' % c)
    return total


def discriminative_selector_loss(selector_maps, annotations, cfg=None):
    ''' Loss of the discriminative scoring module: the active term over all
    pixels of concept samples (no factor 2) and the inactive term over all
    pixels of the other samples. The selector runs on detached features, so
    nothing upstream receives gradient from it. '''
    probs = _per_concept(selector_maps)
    n, h = probs.shape[:2]
    if n == 0:
        raise LapArgumentError('Empty batch')
    presence = presence_matrix(annotations, n, h).to(probs.device)
    heads = _head_configs(cfg, h) if cfg is not None else [None] * h
    probs = _clamped(probs.flatten(2))
    total = probs.new_zeros(())
    for c, head in enumerate(heads):
        pos = presence[:, c]
        neg = ~pos
        if pos.any() and (head is None or head.min_ar):
            total = total - torch.log(probs[pos, c]).mean()
        if neg.any() and (head is None or head.iar):
            total = total - torch.log1p(-probs[neg, c]).mean()
    return total


def concordance_loss(maps_l, maps_l1, t=config.CONCORDANCE_T, one_sided=False):
    ''' Jensen-Shannon style agreement between LAP l and the next LAP l + 1.
    The deeper map is upsampled (nearest) to the shallower resolution. Only
    pixels whose probabilities differ by more than t count; with one_sided,
    only pixels active at l and inactive at l + 1. Returns the mean over
    samples and concepts; samples with no such pixel contribute 0. '''
    if not 0 < t < 1:
        raise LapArgumentError('Concordance threshold t must lie in (0, 1), got %r' % t)
    p = _per_concept(maps_l)
    q = _per_concept(maps_l1)
    if p.shape[:2] != q.shape[:2]:
        raise LapArgumentError('Maps disagree on samples/heads: %s vs %s' % (tuple(p.shape), tuple(q.shape)))
    if q.shape[-2:] != p.shape[-2:]:
        q = F.interpolate(q, size=p.shape[-2:], mode='nearest')
    p, q = _clamped(p), _clamped(q)
    diff = p - q
    mask = (diff > t) if one_sided else (diff.abs() > t)
    mask = mask.detach().to(p.dtype)
    terms = diff * (torch.log(p) - torch.log(q)) - diff * (torch.log1p(-p) - torch.log1p(-q))
    m = mask.flatten(2).sum(-1)
    per_sample = (terms * mask).flatten(2).sum(-1) / (2 * m.clamp(min=1))
    return per_sample.mean()


def resize_box(box, input_size, map_size):
    ''' Map an (x, y, w, h) input-pixel box onto a map grid, rounding outward.
    Returns (row0, row1, col0, col1), half-open, at least one pixel. '''
    x, y, w, h = box
    (in_h, in_w), (m_h, m_w) = input_size, map_size
    sy, sx = float(m_h) / in_h, float(m_w) / in_w
    r0 = int(math.floor(round(y * sy, 9)))
    r1 = int(math.ceil(round((y + h) * sy, 9)))
    c0 = int(math.floor(round(x * sx, 9)))
    c1 = int(math.ceil(round((x + w) * sx, 9)))
    r0, c0 = min(max(r0, 0), m_h - 1), min(max(c0, 0), m_w - 1)
    r1, c1 = min(r1, m_h), min(c1, m_w)
    if r1 <= r0 or c1 <= c0:
        if not config.SILENT_ERRORS:
            logger.warning('Degenerate box %s at map size %s; clamping to one pixel' % (box, map_size))
        r1, c1 = max(r1, r0 + 1), max(c1, c0 + 1)
    return r0, r1, c0, c1


def bbox_supervision_loss(concept_maps, annotations, input_size, cfg=None, selector_maps=None):
    ''' Fully supervised LAP loss from annotated boxes.
    For concept samples: the active term (factor 2) over the more probable half
    of the pixels inside each box, and the inactive term over every pixel
    outside all boxes. Other samples get the usual top-k3 inactive term.
    Args:
        concept_maps: ConceptMaps or N x h x H x W probabilities.
        annotations: ConceptAnnotations with boxes in input coordinates.
        input_size: (height, width) of the network input.
        cfg: DiscLossConfig (or one per head); only iar is used; None skips the inactive term.
    '''
    probs = _per_concept(concept_maps)
    n, h, height, width = probs.shape
    if n == 0:
        raise LapArgumentError('Empty batch')
    if len(annotations) != n:
        raise LapArgumentError('%d annotations for %d samples' % (len(annotations), n))
    heads = _head_configs(cfg, h)
    selection = probs.detach() if selector_maps is None else _per_concept(selector_maps).detach()

    active, outside, inactive = [[] for _ in range(h)], [[] for _ in range(h)], [[] for _ in range(h)]
    for s, ann in enumerate(annotations):
        for c in range(h):
            p = probs[s, c]
            if c in ann.concepts_present:
                boxes = ann.boxes.get(c, [])
                if not boxes:
                    logger.debug('Sample %s has concept %d but no boxes' % (ann.sample_id, c))
                    continue
                inside = torch.zeros(height, width, dtype=torch.bool, device=p.device)
                box_terms = []
                for box in boxes:
                    r0, r1, c0, c1 = resize_box(box, input_size, (height, width))
                    inside[r0:r1, c0:c1] = True
                    vals = p[r0:r1, c0:c1].reshape(-1)
                    k = int(math.ceil(vals.numel() / 2.0))
                    top = _order(vals.detach(), True)[:k]
                    box_terms.append(-torch.log(_clamped(vals[top])).mean())
                active[c].append(2 * torch.stack(box_terms).mean())
                rest = p[~inside]
                if rest.numel():
                    outside[c].append(-torch.log1p(-_clamped(rest)).mean())
            elif heads[c].iar is not None:
                k3 = _count(heads[c].iar, height * width)
                if k3:
                    inactive[c].append(-_selected_log(p.reshape(1, -1), selection[s, c].reshape(1, -1),
                                                      k3, True, False).mean())

    total = probs.new_zeros(())
    for c in range(h):
        for terms in (active[c], outside[c], inactive[c]):
            if terms:
                total = total + torch.stack(terms).mean()
    return total


def combine_losses(task_loss, per_lap_losses, per_pair_concordance, weights=None):
    ''' task * w_task + w_lap * sum(per-LAP losses) + w_pair * sum(pair losses). '''
    weights = weights if weights is not None else LossWeights()
    total = weights.task * task_loss
    for l in per_lap_losses:
        total = total + weights.lap * l
    for l in per_pair_concordance:
        total = total + weights.pair * l
    return total
