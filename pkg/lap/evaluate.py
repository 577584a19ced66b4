""" Tools for evaluating interpretation maps: binarization, IoU against ground
truth, keep-k% faithfulness curves and LAP predictor accuracies. """

import logging
import math

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
from sklearn.linear_model import RidgeClassifier
from sklearn.metrics import balanced_accuracy_score

from . import config
from .exceptions import LapArgumentError, ProbeTrainingError, ThresholdFitError

logger = logging.getLogger(__name__)


def normalize_map(m):
    ''' Divide a map (or each map of an N x H x W stack) by its maximum.
    All-zero maps come back unchanged. '''
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2:
        raise LapArgumentError('Expected an H x W map, got shape %s' % (m.shape,))
    peak = m.max(axis=(-2, -1), keepdims=True)
    return np.where(peak > 0, m / np.where(peak > 0, peak, 1.0), m)


def fit_global_threshold(maps, masks, alpha=config.THRESHOLD_ALPHA, tol=config.THRESHOLD_TOL,
                         max_iter=config.THRESHOLD_MAX_ITER):
    ''' Threshold on normalized scores separating mask pixels from the rest.
    A ridge classifier with balanced class weights is fit on (score, in-mask)
    pixel pairs; the threshold is where its decision function crosses zero.
    Args:
        maps: normalized score maps (list or array of H x W).
        masks: boolean masks of the same shapes.
    '''
    if not len(maps):
        raise ThresholdFitError('No maps to fit a threshold on')
    x = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps])
    y = np.concatenate([np.asarray(b, dtype=bool).reshape(-1) for b in masks])
    if x.shape != y.shape:
        raise LapArgumentError('Maps and masks hold %d and %d pixels' % (len(x), len(y)))
    if len(np.unique(y)) < 2:
        raise ThresholdFitError('Threshold fitting needs both in-mask and out-of-mask pixels')
    clf = RidgeClassifier(alpha=alpha, solver='lsqr', tol=tol, max_iter=max_iter, class_weight='balanced')
    clf.fit(x[:, None], y)
    coef, intercept = float(clf.coef_.ravel()[0]), float(clf.intercept_.ravel()[0])
    if coef == 0:
        raise ThresholdFitError('Scores carry no information about the masks (zero slope)')
    if coef < 0:
        logger.warning('Threshold classifier has a negative slope: higher scores mean outside the masks')
    threshold = -intercept / coef
    logger.info('Fitted global threshold %.4f on %d pixels' % (threshold, len(x)))
    return threshold


def binarize(m, threshold):
    return np.asarray(m) > threshold


def binarize_top_scored(m, area):
    ''' Mask of exactly `area` highest-scored pixels; ties go to the lower
    row-major index. '''
    m = np.asarray(m)
    if not 0 <= area <= m.size:
        raise LapArgumentError('area = %d outside [0, %d]' % (area, m.size))
    order = np.argsort(-m.reshape(-1), kind='stable')[:int(area)]
    mask = np.zeros(m.size, dtype=bool)
    mask[order] = True
    return mask.reshape(m.shape)


def iou(a, b):
    ''' Intersection over union of two boolean masks; 1.0 when both are empty. '''
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise LapArgumentError('Mask shapes differ: %s vs %s' % (a.shape, b.shape))
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / union


def box_mask(annotation, size, concept=0):
    ''' Union of an annotation's (x, y, w, h) boxes for one concept, H x W. '''
    mask = np.zeros(tuple(size), dtype=bool)
    for x, y, w, h in annotation.boxes.get(concept, []):
        mask[y:y + h, x:x + w] = True
    return mask


def mean_iou(maps, masks, threshold=None):
    ''' Mean IoU of score maps against masks. With a threshold, maps are
    normalized and binarized by it; without, each map keeps as many
    top-scored pixels as its mask holds. '''
    ious = []
    for m, b in zip(maps, masks):
        b = np.asarray(b, dtype=bool)
        if threshold is None:
            pred = binarize_top_scored(m, int(b.sum()))
        else:
            pred = binarize(normalize_map(m), threshold)
        ious.append(iou(pred, b))
    return float(np.mean(ious)) if ious else float('nan')


def keep_count(k, n_pixels):
    ''' Pixels kept for a keep ratio k: ceil, so k > 0 keeps at least one. '''
    return int(math.ceil(round(k * n_pixels, 9)))


def keep_top_pixels(images, score_maps, k):
    ''' Zero every pixel of each N x C x H x W image except its top-k% scored
    ones (all channels). '''
    images = torch.as_tensor(images)
    n, _, h, w = images.shape
    keep = np.stack([binarize_top_scored(s, keep_count(k, h * w)) for s in np.asarray(score_maps)])
    return images * torch.from_numpy(keep[:, None].astype(np.float32)).to(images.dtype)


def _agreement(logits, reference, top):
    top = min(top, logits.shape[1])
    best = logits.topk(top, dim=1)[1]
    return float((best == reference[:, None]).any(1).float().mean())


def faithfulness_curve(model, images, score_maps, ks=None, labels=None, mode='prediction',
                       batch_size=256, device='cpu'):
    ''' Keep-k% curve of one interpretation method.
    Args:
        model: the classifier (evaluated in eval mode).
        images: N x C x H x W inputs.
        score_maps: N x H x W scores of the method.
        ks: keep ratios in (0, 1].
        labels: ground truth, required in 'ground_truth' mode.
        mode: 'prediction' compares with the model's own predictions on the
            intact images, 'ground_truth' with the labels.
    Returns a list of {'k', 'top1', 'top5'} dicts.
    '''
    from .train import predict
    ks = list(config.KEEP_RATIOS if ks is None else ks)
    if not ks:
        raise LapArgumentError('No keep ratios given')
    if any(not 0 < k <= 1 for k in ks):
        raise LapArgumentError('Keep ratios must lie in (0, 1]: %s' % ks)
    images = torch.as_tensor(images)
    if np.asarray(score_maps).shape != tuple(images.shape[:1]) + tuple(images.shape[-2:]):
        raise LapArgumentError('Score maps %s do not match images %s' % (
            np.asarray(score_maps).shape, tuple(images.shape)))
    if mode == 'prediction':
        reference = predict(model, images, batch_size, device).argmax(1)
    elif mode == 'ground_truth':
        if labels is None:
            raise LapArgumentError('ground_truth mode needs labels')
        reference = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    else:
        raise LapArgumentError("mode must be 'prediction' or 'ground_truth', got %r" % mode)
    curve = []
    for k in ks:
        logits = predict(model, keep_top_pixels(images, score_maps, k), batch_size, device)
        curve.append({'k': float(k), 'top1': _agreement(logits, reference, 1),
                      'top5': _agreement(logits, reference, 5)})
        logger.debug('keep %.2f: top1 %.4f' % (k, curve[-1]['top1']))
    return curve


def predictivity_and_faithfulness(lap_preds, model_preds, labels):
    ''' (agreement with the ground truth, agreement with the model). '''
    lap_preds, model_preds, labels = np.asarray(lap_preds), np.asarray(model_preds), np.asarray(labels)
    if not len(lap_preds) == len(model_preds) == len(labels):
        raise LapArgumentError('Prediction lists differ in length: %d, %d, %d' % (
            len(lap_preds), len(model_preds), len(labels)))
    if not len(labels):
        raise LapArgumentError('No predictions to compare')
    return float(np.mean(lap_preds == labels)), float(np.mean(lap_preds == model_preds))


def random_score_maps(n, size, seed=0):
    ''' Uniform-random baseline maps, N x H x W. '''
    return np.random.default_rng(seed).random((n,) + tuple(size))


def oracle_score_maps(masks):
    ''' Ground-truth masks used as score maps. '''
    return np.asarray(masks, dtype=np.float64)


def curve_rows(method, mode, curve):
    return [{'method': method, 'mode': mode, 'k': p['k'], 'top1': p['top1'], 'top5': p['top5']}
            for p in curve]


def plot_faithfulness_curves(data, path=None):
    ''' Top-1 agreement against k, one line per method. Takes the curves
    table (DataFrame or CSV path). '''
    if not isinstance(data, pd.DataFrame):
        data = pd.read_csv(data)
    fig, ax = plt.subplots(figsize=(5, 4))
    for (method, mode), rows in data.groupby(['method', 'mode']):
        ax.plot(rows['k'], rows['top1'], marker='o', label='%s (%s)' % (method, mode))
    ax.set_xlabel('kept pixels')
    ax.set_ylabel('top-1 agreement')
    ax.set_ylim(0, 1.05)
    ax.legend()
    if path is not None:
        fig.savefig(path, dpi=100)
        plt.close(fig)
    return fig


def lap_score_maps(stack, concept=0):
    ''' N x H0 x W0 ranking scores of a stack: the unclipped accumulated
    scores, which keep the ordering the clipped integrated map flattens. '''
    from .interpret import accumulated_scores
    scores = accumulated_scores(stack, concept).numpy()
    return scores if stack.batched else scores[None]


def _probe_scores(train_feats, train_targets, test_feats, test_targets, seed):
    from .interpret import fc_probe_train
    probe = fc_probe_train(train_feats, train_targets, seed)
    return float(np.mean(probe.predict(test_feats) == test_targets))


def evaluate_model(model, val_split, test_split, cfg, device='cpu'):
    ''' Run every protocol on a trained model.
    The global threshold is fit on the integrated maps of the concept
    samples of val_split; everything else is measured on test_split.
    Top-scored IoU and the keep-k curve rank pixels by lap_score_maps.
    Returns (metrics dict, curve rows).
    '''
    from .interpret import collect_stack, concept_size_features, integrate_stack, lap_predictions
    from .train import predict
    section = cfg['evaluate']
    concept = cfg['interpret']['concept']
    decay = cfg['interpret']['decay_alpha']
    seed = cfg['seed']
    labels = np.asarray(test_split.labels)
    logits = predict(model, test_split.images, device=device)
    model_preds = logits.argmax(1).numpy()
    metrics = {'test_balanced_accuracy': float(balanced_accuracy_score(labels, model_preds)),
               'test_accuracy': float(np.mean(model_preds == labels))}
    rows = []
    if not model.laps():
        logger.warning('Model has no LAP layers; only accuracy is reported')
        return metrics, rows

    stack = collect_stack(model, test_split.images, decay, device=device)
    val_stack = collect_stack(model, val_split.images, decay, device=device)
    val_preds = val_stack.logits.argmax(1).numpy()
    class_heads = section['class_heads']
    for l, (maps, _) in enumerate(stack.layers, 1):
        preds = lap_predictions(maps, class_heads, concept)
        metrics['lap%d_predictivity' % l], metrics['lap%d_faithfulness' % l] = \
            predictivity_and_faithfulness(preds, model_preds, labels)
        train_feats = concept_size_features(val_stack.layers[l - 1][0])
        test_feats = concept_size_features(maps)
        try:
            metrics['lap%d_probe_predictivity' % l] = _probe_scores(
                train_feats, val_split.labels, test_feats, labels, seed)
            metrics['lap%d_probe_faithfulness' % l] = _probe_scores(
                train_feats, val_preds, test_feats, model_preds, seed)
        except ProbeTrainingError as e:
            logger.warning('Skipping the size-feature probe of LAP %d: %s' % (l, e))

    integrated = integrate_stack(stack, concept).numpy()
    ranked = lap_score_maps(stack, concept)
    positive = np.asarray([m.any() for m in test_split.masks])
    if positive.any():
        masks = test_split.masks[positive]
        val_positive = np.asarray([m.any() for m in val_split.masks])
        val_integrated = integrate_stack(val_stack, concept).numpy()
        try:
            threshold = fit_global_threshold(normalize_map(val_integrated[val_positive]),
                                             val_split.masks[val_positive], section['threshold_alpha'],
                                             section['threshold_tol'], section['threshold_max_iter'])
            metrics['global_threshold'] = threshold
            metrics['iou_global_threshold'] = mean_iou(integrated[positive], masks, threshold)
        except ThresholdFitError as e:
            logger.warning('No global threshold: %s' % e)
        metrics['iou_half_threshold'] = float(np.mean([iou(m > 0.5, b) for m, b in zip(integrated[positive], masks)]))
        metrics['iou_top_scored'] = mean_iou(ranked[positive], masks)
        baseline = random_score_maps(len(masks), masks.shape[-2:], seed)
        metrics['random_iou_top_scored'] = mean_iou(baseline, masks)
    else:
        logger.warning('Test split has no concept masks; skipping localization metrics')

    mode = section['mode']
    sources = [('lap', ranked),
               ('random', random_score_maps(len(labels), integrated.shape[-2:], seed)),
               ('oracle', oracle_score_maps(test_split.masks))]
    for method, maps in sources:
        curve = faithfulness_curve(model, test_split.images, maps, section['ks'], labels, mode, device=device)
        rows += curve_rows(method, mode, curve)
        for p in curve:
            metrics['faithfulness_%s_top1_k%.2f' % (method, p['k'])] = p['top1']
    return metrics, rows
