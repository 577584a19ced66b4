''' On-disk formats: LAPM float containers, LAPC checkpoints, metrics reports,
curve tables and PNG heatmaps.

LAPM layout (little-endian):
    b"LAPM" | u32 version | u32 ndim | ndim x u32 dims | float32 data (row-major)

LAPC layout (little-endian):
    b"LAPC" | u32 version | u32 header length | UTF-8 JSON header | float32 payload
The header holds the graph description, the model variant, one entry per
named tensor (name, shape, dtype, offset in floats) and the SHA-256 digest of
the payload.
'''

import hashlib
import logging
import os
import struct

import numpy as np
import pandas as pd
import simplejson as json
import torch

from .exceptions import LapIntegrityError

logger = logging.getLogger(__name__)

LAPM_MAGIC = b'LAPM'
LAPM_VERSION = 1
CHECKPOINT_MAGIC = b'LAPC'
CHECKPOINT_VERSION = 1
CURVE_COLUMNS = ['method', 'mode', 'k', 'top1', 'top5']


def _ensure_dir(path):
    d = os.path.dirname(path)
    if d and not os.path.exists(d):
        os.makedirs(d)


def write_lapm(path, array):
    array = np.ascontiguousarray(np.asarray(array, dtype='<f4'))
    _ensure_dir(path)
    with open(path, 'wb') as f:
        f.write(LAPM_MAGIC)
        f.write(struct.pack('<II', LAPM_VERSION, array.ndim))
        f.write(struct.pack('<%dI' % array.ndim, *array.shape))
        f.write(array.tobytes())


def read_lapm(path):
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < 12 or data[:4] != LAPM_MAGIC:
        raise LapIntegrityError('%s is not a LAPM container' % path)
    version, ndim = struct.unpack_from('<II', data, 4)
    if version != LAPM_VERSION:
        raise LapIntegrityError('%s: unsupported LAPM version %d' % (path, version))
    offset = 12 + 4 * ndim
    if len(data) < offset:
        raise LapIntegrityError('%s: truncated header' % path)
    shape = struct.unpack_from('<%dI' % ndim, data, 12)
    count = int(np.prod(shape)) if ndim else 1
    if len(data) - offset != 4 * count:
        raise LapIntegrityError('%s: expected %d floats, found %d bytes' % (path, count, len(data) - offset))
    return np.frombuffer(data, dtype='<f4', offset=offset).reshape(shape).astype(np.float32)


def save_checkpoint(path, model, extra=None):
    ''' Write a LAPC checkpoint of a LapModel: graph description plus every
    parameter and buffer as float32. '''
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        flat = np.ascontiguousarray(arr, dtype='<f4').reshape(-1)
        entries.append({'name': name, 'shape': list(arr.shape), 'dtype': str(arr.dtype), 'offset': offset})
        chunks.append(flat.tobytes())
        offset += flat.size
    payload = b''.join(chunks)
    header = {'version': CHECKPOINT_VERSION, 'graph': model.describe(), 'variant': model.variant,
              'params': entries, 'digest': hashlib.sha256(payload).hexdigest(), 'extra': extra or {}}
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    _ensure_dir(path)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)
    logger.info('Saved checkpoint %s (%d tensors)' % (path, len(entries)))


def read_checkpoint(path):
    ''' (header, {name: numpy array}) after verifying magic, version and digest. '''
    if not os.path.exists(path):
        raise LapIntegrityError('Checkpoint %s does not exist' % path)
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise LapIntegrityError('%s is not a LAPC checkpoint' % path)
    version, n = struct.unpack_from('<II', data, 4)
    if version != CHECKPOINT_VERSION:
        raise LapIntegrityError('%s: unsupported checkpoint version %d' % (path, version))
    try:
        header = json.loads(data[12:12 + n].decode('utf-8'))
    except (ValueError, UnicodeDecodeError) as e:
        raise LapIntegrityError('%s: unreadable header (%s)' % (path, e))
    if 'version' not in header:
        raise LapIntegrityError('%s: header has no version field' % path)
    payload = data[12 + n:]
    if hashlib.sha256(payload).hexdigest() != header.get('digest'):
        raise LapIntegrityError('%s: payload digest mismatch' % path)
    flat = np.frombuffer(payload, dtype='<f4')
    arrays = {}
    for e in header['params']:
        size = int(np.prod(e['shape'])) if e['shape'] else 1
        arrays[e['name']] = flat[e['offset']:e['offset'] + size].reshape(e['shape']).astype(e['dtype'])
    return header, arrays


def load_checkpoint(path):
    ''' Rebuild the LapModel stored in a checkpoint. '''
    from .network import model_from_description
    header, arrays = read_checkpoint(path)
    model = model_from_description(header['graph'], header.get('variant', 'lap'))
    state = dict((k, torch.from_numpy(np.array(v))) for k, v in arrays.items())
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise LapIntegrityError('%s: parameters do not match the graph (%s)' % (path, e))
    return model, header


def format_report(metrics):
    ''' Flat key/value report, one "key<TAB>value" per line, keys sorted. '''
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, (float, np.floating)):
            value = '%.6f' % value
        lines.append('%s\t%s' % (key, value))
    return '\n'.join(lines) + '\n'


def write_report(path, metrics):
    _ensure_dir(path)
    with open(path, 'w') as f:
        f.write(format_report(metrics))


def read_report(path):
    metrics = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                key, value = line.rstrip('\n').split('\t', 1)
                metrics[key] = value
    return metrics


def write_curves(path, rows):
    ''' Faithfulness curves as CSV with header method,mode,k,top1,top5. '''
    _ensure_dir(path)
    data = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    data.to_csv(path, index=False, float_format='%.6f')
    return data


def save_heatmap(path, grid):
    ''' 8-bit PNG rendering of a [0, 1] map. '''
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    _ensure_dir(path)
    plt.imsave(path, np.clip(np.asarray(grid, dtype=np.float32), 0, 1), cmap='jet', vmin=0, vmax=1)
