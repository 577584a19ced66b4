''' Command line entry points: lap generate | train | interpret | evaluate. '''

import argparse
import copy
import logging
import os
import sys

import numpy as np
import torch

from . import config, set_logging_level
from .exceptions import LapArgumentError, LapConfigError, LapError, ThresholdFitError

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.lapc'
REPORT_NAME = 'report.txt'
CURVES_NAME = 'curves.csv'


def resolve_config(path=None, seed=None):
    ''' Load a config file (or a bundled preset by name) and apply the
    --seed override. '''
    if path is not None and not os.path.exists(path) and os.path.exists(config.preset_path(path)):
        path = config.preset_path(path)
    cfg = config.load_config(path)
    if seed is not None:
        cfg['seed'] = int(seed)
    return cfg


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)


def cmd_generate(cfg, out=None):
    ''' Generate the synthetic dataset and write it to disk. Returns its root. '''
    from .synth import SynthSpec, generate, save_dataset
    root = config.data_root(cfg, out)
    spec = SynthSpec.from_config(cfg)
    save_dataset(generate(spec), spec, root)
    return root


def _initial_model(cfg, checkpoint=None):
    ''' Model training starts from: a fresh one built from the config, or a
    checkpoint. A vanilla checkpoint under a lap config gets the configured
    LAPs inserted, keeping its trained weights. '''
    from .export import load_checkpoint
    from .network import LapModel, build_model, placements_for
    from .surgery import extend_architecture
    if checkpoint is None:
        return build_model(cfg)
    model, _ = load_checkpoint(checkpoint)
    wanted = cfg['model']['variant']
    if model.variant == wanted:
        logger.info('Resuming %s model from %s' % (wanted, checkpoint))
        return model
    if model.variant == 'vanilla' and wanted == 'lap':
        spec = placements_for(cfg, model.graph)
        graph = extend_architecture(model.graph, spec)
        logger.info('Extended vanilla checkpoint %s with %d LAPs' % (checkpoint, len(spec)))
        return LapModel(graph, 'lap')
    raise LapConfigError('Cannot train a %s config from the %s checkpoint %s' % (wanted, model.variant, checkpoint),
                         ['model.variant'])


def cmd_train(cfg, data=None, out='.', device='cpu', checkpoint=None):
    ''' Train the configured model and write the checkpoint of the best
    validation epoch. Training starts from `checkpoint` when one is given.
    Returns the checkpoint path. '''
    from .export import save_checkpoint
    from .losses import LossConfig
    from .surgery import Stage, staged_training
    from .synth import load_dataset
    from .train import Trainer, concepts_map

    splits, _ = load_dataset(config.data_root(cfg, data))
    _seed_everything(cfg['seed'])
    model = _initial_model(cfg, checkpoint)
    section = cfg['train']
    trainer = Trainer(model, LossConfig.from_config(cfg['losses']), concepts_map(cfg['concepts']),
                      splits['train'], splits.get('val'), section['batch_size'], cfg['seed'], device,
                      section['num_workers'])
    if cfg['stages']:
        staged_training(trainer.model, [Stage.from_dict(s) for s in cfg['stages']], trainer.fit)
    else:
        trainer.train(section['optimizer'], section['lr'], section['weight_decay'], section['epochs'])
    path = os.path.join(out, CHECKPOINT_NAME)
    save_checkpoint(path, trainer.model.cpu(), {'history': trainer.history, 'seed': cfg['seed'],
                                                'best_val_balanced_accuracy': trainer.best_score})
    return path


def _load_inputs(inputs):
    ''' (images, sample ids) from a LAPM image container or a dataset
    directory (its test split). '''
    from .export import read_lapm
    from .synth import load_dataset
    if os.path.isdir(inputs):
        splits, _ = load_dataset(inputs)
        return splits['test'].images, splits['test'].sample_ids
    images = read_lapm(inputs)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise LapArgumentError('Input container %s must hold N x C x H x W images' % inputs)
    return images, ['%06d' % i for i in range(len(images))]


def cmd_interpret(cfg, checkpoint, inputs, out='.', device='cpu'):
    ''' Export per-LAP concept maps and the integrated map of `inputs`. '''
    from .export import load_checkpoint
    from .interpret import collect_stack, export_stack
    model, _ = load_checkpoint(checkpoint)
    model.to(device)
    images, sample_ids = _load_inputs(inputs)
    section = cfg['interpret']
    stack = collect_stack(model, images, section['decay_alpha'], device=device)
    return export_stack(stack, out, section['concept'], section['heatmaps'], sample_ids)


def _with_box_masks(split, annotations, concept):
    ''' Copy of a split whose ground-truth masks are rasterized from
    annotation boxes. '''
    from .evaluate import box_mask
    by_id = dict((a.sample_id, a) for a in annotations)
    missing = [sid for sid in split.sample_ids if sid not in by_id]
    if missing:
        raise LapArgumentError('%d test samples have no annotation (first: %s)' % (len(missing), missing[0]))
    split = copy.copy(split)
    split.masks = np.stack([box_mask(by_id[sid], split.images.shape[-2:], concept) for sid in split.sample_ids])
    return split


def _external_threshold(val_maps, val, section):
    ''' Global threshold fit on external maps of the validation split, or
    None when its concept samples cannot separate the classes. '''
    from .evaluate import fit_global_threshold, normalize_map
    from .export import read_lapm
    maps = read_lapm(val_maps)
    if maps.shape != val.masks.shape:
        raise LapArgumentError('Validation maps %s do not match the validation masks %s' % (
            maps.shape, val.masks.shape))
    positive = np.asarray([m.any() for m in val.masks])
    if not positive.any():
        logger.warning('Validation split has no concept masks; no external threshold')
        return None
    try:
        return fit_global_threshold(normalize_map(maps[positive]), val.masks[positive], section['threshold_alpha'],
                                    section['threshold_tol'], section['threshold_max_iter'])
    except ThresholdFitError as e:
        logger.warning('No external threshold: %s' % e)
        return None


def cmd_evaluate(cfg, checkpoint=None, maps=None, annotations=None, data=None, out='.', device='cpu',
                 val_maps=None):
    ''' Evaluate a checkpoint and/or external score maps on the test split
    and write the metrics report, the curves table and its plot. External
    maps of the validation split (val_maps) give them a global threshold
    too. Returns the metrics. '''
    from .evaluate import curve_rows, faithfulness_curve, mean_iou, plot_faithfulness_curves
    from .export import load_checkpoint, read_lapm, write_curves, write_report
    from .synth import load_annotations, load_dataset

    if checkpoint is None and maps is None:
        raise LapArgumentError('evaluate needs --checkpoint, --maps or both')
    splits, _ = load_dataset(config.data_root(cfg, data))
    val, test = splits['val'], splits['test']
    concept = cfg['interpret']['concept']
    if annotations is not None:
        test = _with_box_masks(test, load_annotations(annotations, test.images.shape[-2:]), concept)

    metrics, rows, model = {}, [], None
    if checkpoint is not None:
        from .evaluate import evaluate_model
        model, _ = load_checkpoint(checkpoint)
        model.to(device)
        metrics, rows = evaluate_model(model, val, test, cfg, device)
    if maps is not None:
        external = read_lapm(maps)
        if external.shape != test.masks.shape:
            raise LapArgumentError('Maps %s do not match the test masks %s' % (external.shape, test.masks.shape))
        positive = np.asarray([m.any() for m in test.masks])
        if positive.any():
            metrics['external_iou_top_scored'] = mean_iou(external[positive], test.masks[positive])
            threshold = _external_threshold(val_maps, val, cfg['evaluate']) if val_maps is not None else None
            if threshold is not None:
                metrics['external_global_threshold'] = threshold
                metrics['external_iou_threshold'] = mean_iou(external[positive], test.masks[positive], threshold)
        if model is not None:
            mode = cfg['evaluate']['mode']
            curve = faithfulness_curve(model, test.images, external, cfg['evaluate']['ks'], test.labels,
                                       mode, device=device)
            rows += curve_rows('external', mode, curve)
            for p in curve:
                metrics['faithfulness_external_top1_k%.2f' % p['k']] = p['top1']

    write_report(os.path.join(out, REPORT_NAME), metrics)
    if rows:
        data = write_curves(os.path.join(out, CURVES_NAME), rows)
        plot_faithfulness_curves(data, os.path.join(out, 'curves.png'))
    uri = cfg['report']['database_uri']
    if uri:
        from .database import Database
        Database(uri).record_run(cfg['report']['run_name'], cfg['seed'], cfg, metrics)
    logger.info('Wrote %d metrics to %s' % (len(metrics), out))
    return metrics


def build_parser():
    parser = argparse.ArgumentParser(prog='lap', description='Local Attention Pooling toolkit')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file or bundled preset name (synth, rsna, celeba, imagenet)')
    common.add_argument('--seed', type=int, help='Override the config seed')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--device', default='cpu', help='torch device (default: cpu)')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for info, -vv for debug')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    sub.add_parser('generate', parents=[common], help='Write the synthetic dataset')

    p = sub.add_parser('train', parents=[common], help='Train a model and write its checkpoint')
    p.add_argument('--data', help='Dataset directory (default: data.root or $%s)' % config.DATA_DIR_ENV)
    p.add_argument('--checkpoint', help='Start from this checkpoint; a vanilla one gets the configured LAPs')

    p = sub.add_parser('interpret', parents=[common], help='Export concept maps')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--inputs', required=True, help='LAPM image container or dataset directory')

    p = sub.add_parser('evaluate', parents=[common], help='Write the metrics report')
    p.add_argument('--checkpoint')
    p.add_argument('--maps', help='LAPM container of external N x H x W score maps')
    p.add_argument('--val-maps', help='LAPM container of the external maps of the validation split')
    p.add_argument('--annotations', help='Annotation file with ground-truth boxes for the test split')
    p.add_argument('--data', help='Dataset directory (default: data.root or $%s)' % config.DATA_DIR_ENV)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_logging_level('debug' if args.verbose > 1 else 'info')
    try:
        cfg = resolve_config(args.config, args.seed)
        out = args.out or '.'
        if args.command == 'generate':
            cmd_generate(cfg, args.out)
        elif args.command == 'train':
            cmd_train(cfg, args.data, out, args.device, args.checkpoint)
        elif args.command == 'interpret':
            cmd_interpret(cfg, args.checkpoint, args.inputs, out, args.device)
        else:
            cmd_evaluate(cfg, args.checkpoint, args.maps, args.annotations, args.data, out, args.device,
                         args.val_maps)
    except (LapError, IOError) as e:
        logger.error('%s failed: %s' % (args.command, e))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
