''' Reading the concept maps of a LAP-extended model: capture them from a
forward pass, integrate them across layers into one input-resolution map,
and use them directly as predictors. '''

import logging
import os

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from . import config
from .exceptions import GeometryError, LapArgumentError, ProbeTrainingError, StackValidationError
from .pooling import ConceptMaps, lap_modules

logger = logging.getLogger(__name__)


class InterpretationStack(object):

    ''' Concept maps of every LAP of a model for one batch, shallow to deep.
    Args:
        layers: list of (ConceptMaps, KernelSpec) pairs. Maps may be
            h x H x W (one sample) or N x h x H x W.
        input_size: (H0, W0) of the network input.
        decay_alpha: impact decay factor in (0, 1].
        logits: optional predictions of the forward pass the maps came from.
    '''

    def __init__(self, layers, input_size, decay_alpha=config.DECAY_ALPHA, logits=None):
        self.layers = list(layers)
        self.input_size = tuple(int(v) for v in input_size)
        self.decay_alpha = float(decay_alpha)
        self.logits = logits
        self.validate()

    def __len__(self):
        return len(self.layers)

    @property
    def batched(self):
        return self.layers[0][0].per_concept.dim() == 4

    @property
    def n_heads(self):
        return self.layers[0][0].per_concept.shape[-3]

    def maps(self, concept):
        ''' Per-layer N x H_l x W_l maps of one concept (N = 1 when unbatched). '''
        if not 0 <= concept < self.n_heads:
            raise LapArgumentError('Concept %d out of [0, %d)' % (concept, self.n_heads))
        out = []
        for maps, _ in self.layers:
            p = maps.per_concept
            out.append((p if p.dim() == 4 else p.unsqueeze(0))[:, concept].detach())
        return out

    def validate(self):
        if not self.layers:
            raise StackValidationError('Interpretation stack is empty')
        if not 0 < self.decay_alpha <= 1:
            raise StackValidationError('decay_alpha must lie in (0, 1], got %r' % self.decay_alpha)
        shapes = [tuple(m.per_concept.shape) for m, _ in self.layers]
        if len(set(len(s) for s in shapes)) != 1 or len(set(s[:-2] for s in shapes)) != 1:
            raise StackValidationError('Layers disagree on samples/heads: %s' % shapes)
        for l in range(len(self.layers) - 1):
            kernel = self.layers[l][1]
            if kernel is None:
                raise StackValidationError('Layer %d has no kernel geometry' % (l + 1))
            h, w = shapes[l][-2:]
            try:
                expected = kernel.output_size(h, w)
            except GeometryError as e:
                raise StackValidationError('Layer %d: %s' % (l + 1, e))
            if tuple(expected) != tuple(shapes[l + 1][-2:]):
                raise StackValidationError('Layer %d pools %s to %s but layer %d is %s' % (
                    l + 1, (h, w), expected, l + 2, shapes[l + 1][-2:]))
        return self

    def sample(self, i):
        ''' Single-sample stack of sample i. '''
        if not self.batched:
            return self
        layers = [(ConceptMaps(m.per_concept[i], m.aggregated[i]), k) for m, k in self.layers]
        logits = self.logits[i] if self.logits is not None else None
        return InterpretationStack(layers, self.input_size, self.decay_alpha, logits)


def extract_stack(model, x, decay_alpha=config.DECAY_ALPHA):
    ''' Run the model once in eval mode and collect the concept maps every LAP
    pooled with during that very pass. '''
    laps = lap_modules(model)
    if not laps:
        raise LapArgumentError('Model has no LAP layers to interpret')
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(x)
        layers = [(m.concept_maps, m.kernel) for m in laps]
    finally:
        model.train(was_training)
    return InterpretationStack(layers, x.shape[-2:], decay_alpha, logits)


def collect_stack(model, images, decay_alpha=config.DECAY_ALPHA, batch_size=256, device='cpu'):
    ''' extract_stack over a whole split, batch by batch, concatenated into
    one batched stack on the CPU. '''
    images = torch.as_tensor(images)
    parts = [extract_stack(model, images[i:i + batch_size].to(device), decay_alpha)
             for i in range(0, len(images), batch_size)]
    if not parts:
        raise LapArgumentError('No images to interpret')
    layers = []
    for l, (_, kernel) in enumerate(parts[0].layers):
        per_concept = torch.cat([p.layers[l][0].per_concept.cpu() for p in parts])
        aggregated = torch.cat([p.layers[l][0].aggregated.cpu() for p in parts])
        layers.append((ConceptMaps(per_concept, aggregated), kernel))
    logits = torch.cat([p.logits.cpu() for p in parts])
    return InterpretationStack(layers, images.shape[-2:], decay_alpha, logits)


def parent_index(size, out_size, kernel):
    ''' Flat index of the window (at the next layer) each pixel of an H x W
    map belongs to. Overlapping windows resolve to the one whose top-left
    corner is nearest. '''
    (h, w), (oh, ow) = size, out_size
    rows = ((torch.arange(h) + kernel.padding) // kernel.stride_h).clamp(0, oh - 1)
    cols = ((torch.arange(w) + kernel.padding) // kernel.stride_w).clamp(0, ow - 1)
    return (rows[:, None] * ow + cols[None, :]).reshape(-1)


def _upsample(grid, size):
    if tuple(grid.shape[-2:]) == tuple(size):
        return grid
    return F.interpolate(grid.unsqueeze(1), size=size, mode='nearest')[:, 0]


def _walk(stack, concept, step):
    ''' Shared deep-to-shallow traversal: step(r, p, window_max, decay) gives
    the layer-l values from the parent values r. '''
    maps = stack.maps(concept)
    n_layers = len(maps)
    current = maps[-1]
    for l in range(n_layers - 2, -1, -1):
        p = maps[l]
        n, h, w = p.shape
        idx = parent_index((h, w), current.shape[-2:], stack.layers[l][1]).to(p.device)
        flat_p = p.reshape(n, -1)
        r = current.reshape(n, -1)[:, idx]
        window_max = flat_p.new_zeros(n, current[0].numel()).scatter_reduce(
            1, idx.expand(n, -1), flat_p, 'amax', include_self=False)[:, idx]
        decay = stack.decay_alpha ** (n_layers - 1 - l)
        current = step(r, flat_p, window_max, decay).reshape(n, h, w)
    out = _upsample(current, stack.input_size)
    return out if stack.batched else out[0]


def _prune(r, p, window_max, decay):
    gate = (r > 0.5) & (window_max > 0.5)
    decayed = p * decay
    refined = torch.where(p > 0.5, torch.maximum(r, decayed), decayed)
    return torch.where(gate, refined, r)


def integrate_stack(stack, concept=0):
    ''' Integrated concept map at input resolution (H0 x W0, or N x H0 x W0).
    The deepest map is taken as is; walking to shallower layers, a window
    is refined only when its parent and at least one of its pixels exceed
    0.5: active pixels keep max(parent, decayed own score), inactive pixels
    get their decayed score. Every other window inherits its parent value.
    The shallowest result is upsampled (nearest) to the input size. '''
    return _walk(stack, concept, _prune)


def accumulated_scores(stack, concept=0):
    ''' Unclipped variant of integrate_stack: each pixel sums its decayed
    score with the accumulated score of its parent, so the ordering below
    0.5 survives. '''
    return _walk(stack, concept, lambda r, p, window_max, decay: r + p * decay)


def integrate_topk_variant(stack, concept, k):
    ''' The k input pixels with the highest accumulated scores, as (i, j)
    tuples in rank order (ties by row-major index). Single-sample stacks
    only; use stack.sample(i) for batches. '''
    if stack.batched and stack.layers[0][0].per_concept.shape[0] != 1:
        raise LapArgumentError('integrate_topk_variant needs a single-sample stack')
    scores = accumulated_scores(stack, concept).reshape(-1)
    h0, w0 = stack.input_size
    if not 0 <= k <= h0 * w0:
        raise LapArgumentError('k = %d outside [0, %d]' % (k, h0 * w0))
    order = torch.sort(scores, descending=True, stable=True)[1][:k]
    return [(int(i) // w0, int(i) % w0) for i in order]


def _per_concept(maps):
    return maps.per_concept if isinstance(maps, ConceptMaps) else torch.as_tensor(maps)


def _result(values):
    values = values.detach().cpu()
    return values.item() if values.dim() == 0 else values.numpy()


def lap_predict_presence(maps, concept=0):
    ''' True iff some pixel of the concept's map is strictly above 0.5. Per
    sample (boolean array) for batched maps. '''
    p = _per_concept(maps)
    if not 0 <= concept < p.shape[-3]:
        raise LapArgumentError('Concept %d out of [0, %d)' % (concept, p.shape[-3]))
    return _result((p[..., concept, :, :] > 0.5).flatten(-2).any(-1))


def lap_predict_class(maps, class_heads):
    ''' Class whose head has the largest summed probability; ties go to the
    lowest index. '''
    if len(class_heads) < 2:
        raise LapArgumentError('Need at least 2 class heads, got %d' % len(class_heads))
    p = _per_concept(maps)
    sums = p[..., list(class_heads), :, :].sum((-1, -2)).detach().cpu().double().numpy()
    # numpy argmax returns the first maximum
    pred = np.argmax(sums, axis=-1)
    return int(pred) if np.ndim(pred) == 0 else pred


def lap_predictions(maps, class_heads=None, concept=0):
    ''' Per-sample class predictions of one LAP: the presence rule for a
    binary concept task, the head-sum rule otherwise. '''
    if class_heads:
        return np.atleast_1d(lap_predict_class(maps, class_heads)).astype(np.int64)
    return np.atleast_1d(lap_predict_presence(maps, concept)).astype(np.int64)


def concept_size_features(maps):
    ''' F_C: the summed probability of every concept head (h, or N x h). '''
    return _result(_per_concept(maps).sum((-1, -2)).double())


def fc_probe_train(features, labels, seed=0, hidden=32, max_iter=500):
    ''' Two-layer MLP probe from concept size features to classes.
    Args:
        features: N x h concept size features.
        labels: N class labels (ground truth or model predictions).
    '''
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ProbeTrainingError('Features %s do not align with %d labels' % (features.shape, len(labels)))
    if len(np.unique(labels)) < 2:
        raise ProbeTrainingError('Probe training needs at least 2 classes')
    probe = make_pipeline(StandardScaler(),
                          MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=max_iter, random_state=seed))
    probe.fit(features, labels)
    return probe


def export_stack(stack, out_dir, concept=0, heatmaps=False, sample_ids=None):
    ''' Write per-LAP concept maps and the integrated map as LAPM containers
    (and optionally one PNG heatmap per sample). Returns the written paths. '''
    from .export import save_heatmap, write_lapm
    paths = []
    for l, (maps, _) in enumerate(stack.layers, 1):
        path = os.path.join(out_dir, 'lap%d_maps.lapm' % l)
        write_lapm(path, maps.per_concept.detach().cpu().numpy())
        paths.append(path)
    integrated = integrate_stack(stack, concept).cpu().numpy()
    path = os.path.join(out_dir, 'integrated_c%d.lapm' % concept)
    write_lapm(path, integrated)
    paths.append(path)
    if heatmaps:
        grids = integrated if stack.batched else integrated[None]
        if sample_ids is None:
            sample_ids = ['%06d' % i for i in range(len(grids))]
        for sid, grid in zip(sample_ids, grids):
            path = os.path.join(out_dir, 'heatmaps', '%s_c%d.png' % (sid, concept))
            save_heatmap(path, grid)
            paths.append(path)
    logger.info('Exported %d map files to %s' % (len(paths), out_dir))
    return paths
