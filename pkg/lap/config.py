''' GLOBAL SETTINGS '''

import copy
import os

import simplejson as json

from .exceptions import LapConfigError

# When True, recoverable problems met while reading annotation files (e.g.,
# degenerate boxes) are not logged. When False, they are logged as warnings.
SILENT_ERRORS = False

# Annotation files sometimes contain lines that can't be parsed. Such problems
# will always be reported, but if IGNORE_BAD_LINES is True, the line is skipped
# and reading continues. When False, the parse error is raised.
IGNORE_BAD_LINES = False

# Environment variable naming the dataset root when the command line and the
# config file don't.
DATA_DIR_ENV = 'LAP_DATA_DIR'


''' DATABASE SETTINGS '''

# Default results store when report.database_uri is not set but a database is
# requested explicitly.
SQLITE_URI = 'sqlite:///lap_results.db'


''' LAP LAYER SETTINGS '''

# Small constant added to every normalized weight. Keeps gradients flowing to
# all pixels and prevents division by zero in the weighted average.
LAP_EPSILON = 1e-4

# Initial value of the trainable sharpening parameter alpha. It is squared
# inside the normalization, so its sign never matters.
LAP_ALPHA_INIT = 4.0

# Default pooling geometry used when a placement doesn't inherit one from the
# layer it replaces.
LAP_KERNEL_SIZE = 2
LAP_STRIDE = 2

# Concept aggregation: 'max', 'sum' or 'linear'.
LAP_AGGREGATION = 'max'

# Width of the optional hidden 1x1 layer of the concept scorer. None gives a
# single C -> h convolution.
LAP_HIDDEN_CHANNELS = None

# Whether each LAP carries a discriminative scoring module (a detached twin of
# the scorer) used to pick the pixels the discrimination loss applies to.
LAP_USE_SELECTOR = True


''' LOSS SETTINGS '''

# Probabilities are clamped to [LOG_CLAMP, 1 - LOG_CLAMP] before any log.
LOG_CLAMP = 1e-7

# Per-pixel difference threshold of the concordance loss.
CONCORDANCE_T = 0.1

# Weights of the task loss, of each LAP's concept loss, and of each LAP pair's
# concordance loss.
TASK_WEIGHT = 1.0
LAP_WEIGHT = 0.25
PAIR_WEIGHT = 0.25

# Reference MinAR / MaxAR / IAR for a single binary concept head.
MIN_AR = 0.1
MAX_AR = 0.5
IAR = 0.1


''' TRAINING SETTINGS '''

EPOCHS = 8
BATCH_SIZE = 64
OPTIMIZER = 'adam'
LEARNING_RATE = 1e-3
WEIGHT_DECAY = 1e-6


''' INTERPRETATION / EVALUATION SETTINGS '''

# Impact decay factor of the map integration.
DECAY_ALPHA = 0.8

# Ridge classifier used to find a global binarization threshold.
THRESHOLD_ALPHA = 0.01
THRESHOLD_TOL = 1e-3
THRESHOLD_MAX_ITER = 100

# Ratios of pixels kept by the faithfulness curves.
KEEP_RATIOS = [0.1, 0.3, 0.5, 0.7, 0.9]


''' SCHEMA '''

# The documented configuration schema. Every key a config file may set is
# listed here along with its default; there are no defaults anywhere else.
DEFAULTS = {
    'seed': 0,
    'data': {
        'root': None,
        'image_size': 64,
        'n_train': 2000,
        'n_val': 250,
        'n_test': 250,
        'positive_fraction': 0.5,
        'radius_min': 4,
        'radius_max': 8,
        'background': 0.3,
        'contrast': 0.4,
        'noise_std': 0.05,
        'n_distractors': 3,
        'distractor_size': 6,
        'distractor_contrast': 0.25,
    },
    'model': {
        'architecture': 'spotnet',
        'variant': 'lap',
        'channels': [16, 32, 64],
        'n_classes': 2,
        'lap_blocks': [2, 3],
        'adaptive_lap': False,
    },
    'lap': {
        'n_heads': 1,
        'hidden_channels': LAP_HIDDEN_CHANNELS,
        'aggregation': LAP_AGGREGATION,
        'alpha_init': LAP_ALPHA_INIT,
        'epsilon': LAP_EPSILON,
        'use_selector': LAP_USE_SELECTOR,
    },
    'concepts': {
        '0': [],
        '1': [0],
    },
    'losses': {
        'supervision': 'weak',
        'heads': [{'min_ar': MIN_AR, 'max_ar': MAX_AR, 'iar': IAR}],
        'concordance_t': CONCORDANCE_T,
        'one_sided_concordance': False,
        'task_weight': TASK_WEIGHT,
        'lap_weight': LAP_WEIGHT,
        'pair_weight': PAIR_WEIGHT,
        'use_lap_loss': True,
        'use_concordance': True,
    },
    'train': {
        'epochs': EPOCHS,
        'batch_size': BATCH_SIZE,
        'optimizer': OPTIMIZER,
        'lr': LEARNING_RATE,
        'weight_decay': WEIGHT_DECAY,
        'num_workers': 0,
    },
    # Optional staged recipe. Each stage: name, trainable (list of 'lap',
    # 'head', 'all' or layer names), optimizer, lr, weight_decay, epochs.
    'stages': [],
    'interpret': {
        'decay_alpha': DECAY_ALPHA,
        'concept': 0,
        'heatmaps': False,
    },
    'evaluate': {
        'ks': KEEP_RATIOS,
        'mode': 'prediction',
        'threshold_alpha': THRESHOLD_ALPHA,
        'threshold_tol': THRESHOLD_TOL,
        'threshold_max_iter': THRESHOLD_MAX_ITER,
        'class_heads': None,
    },
    'report': {
        'database_uri': None,
        'run_name': 'lap',
    },
}

# Sections whose content is free-form (keys are data, not settings).
_FREE_SECTIONS = ('concepts',)

_STAGE_KEYS = set(['name', 'trainable', 'optimizer', 'lr', 'weight_decay', 'epochs'])
_HEAD_KEYS = set(['min_ar', 'max_ar', 'iar'])


def preset_path(name):
    ''' Path of one of the bundled reference configs (synth, rsna, celeba,
    imagenet). '''
    return os.path.join(os.path.dirname(__file__), 'configs', '%s.json' % name)


def default_config():
    return copy.deepcopy(DEFAULTS)


def _compatible(default, value):
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def validate_config(cfg):
    ''' Check a full config dict against the schema. Raises a single
    LapConfigError listing every unknown, missing or mistyped key. '''
    bad = []
    for key in cfg:
        if key not in DEFAULTS:
            bad.append(key)
    for section, default in DEFAULTS.items():
        if section not in cfg:
            bad.append(section)
            continue
        value = cfg[section]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                bad.append(section)
                continue
            if section in _FREE_SECTIONS:
                for k, v in value.items():
                    if not isinstance(v, list) or not all(isinstance(c, int) for c in v):
                        bad.append('%s.%s' % (section, k))
                continue
            for k, v in value.items():
                if k not in default or not _compatible(default[k], v):
                    bad.append('%s.%s' % (section, k))
            for k in default:
                if k not in value:
                    bad.append('%s.%s' % (section, k))
        elif not _compatible(default, value):
            bad.append(section)

    for i, stage in enumerate(cfg.get('stages') or []):
        if not isinstance(stage, dict) or set(stage) - _STAGE_KEYS:
            bad.append('stages[%d]' % i)
    for i, head in enumerate(cfg.get('losses', {}).get('heads') or []):
        if not isinstance(head, dict) or set(head) - _HEAD_KEYS:
            bad.append('losses.heads[%d]' % i)

    if bad:
        raise LapConfigError('Invalid configuration keys', bad)
    return cfg


def merge_config(overrides):
    ''' Deep-merge a (possibly partial) config dict over the defaults and
    validate the result. '''
    cfg = default_config()
    unknown = [k for k in overrides if k not in DEFAULTS]
    if unknown:
        raise LapConfigError('Unknown configuration sections', unknown)
    for section, value in overrides.items():
        if isinstance(DEFAULTS[section], dict) and isinstance(value, dict):
            if section in _FREE_SECTIONS:
                cfg[section] = copy.deepcopy(value)
            else:
                cfg[section].update(copy.deepcopy(value))
        else:
            cfg[section] = copy.deepcopy(value)
    return validate_config(cfg)


def load_config(path=None):
    ''' Read a JSON config file and merge it over the defaults.
    Args:
        path: path to the config file. When None, returns the defaults.
    '''
    if path is None:
        return default_config()
    if not os.path.exists(path):
        raise LapConfigError('Config file not found: %s' % path)
    with open(path) as f:
        try:
            overrides = json.load(f)
        except json.JSONDecodeError as e:
            raise LapConfigError('Config file %s is not valid JSON (%s)' % (path, e))
    if not isinstance(overrides, dict):
        raise LapConfigError('Config file %s must hold a JSON object' % path)
    return merge_config(overrides)


def data_root(cfg, override=None):
    ''' Resolve the dataset directory: explicit argument, then config, then
    the LAP_DATA_DIR environment variable. '''
    root = override or cfg['data'].get('root') or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise LapConfigError('No dataset directory given', ['data.root'])
    return root
