''' Layer graphs and LAP surgery.

A LayerGraph is a flat, ordered list of layer descriptors (with residual
blocks as composites holding their own body/shortcut graphs). It can be built
from a serializable description, turned into a torch module, and extended
with LAPs in place of pools, adaptive pools and strided convolutions.
'''

import copy
import logging
from collections import OrderedDict

import torch
import torch.nn as nn

from .exceptions import GeometryError, GraphValidationError, LapConfigError, PlacementError
from .pooling import (AdaptiveLocalAttentionPool2d, KernelSpec, LapConfig,
                      LocalAttentionPool2d, lap_modules)

logger = logging.getLogger(__name__)

REPLACEABLE = {
    'pool': 'pool',
    'adaptive_pool': 'adaptive_pool',
    'conv': 'strided_conv',
}


class ResidualBlock(nn.Module):

    ''' relu(body(x) + shortcut(x)); an empty shortcut is the identity. '''

    def __init__(self, body, shortcut):
        super(ResidualBlock, self).__init__()
        self.body = body
        self.shortcut = shortcut

    def forward(self, x):
        return torch.relu(self.body(x) + self.shortcut(x))


class Layer(object):

    ''' One layer descriptor: name, kind, constructor arguments and the live
    module. Residual layers also hold body and shortcut graphs. '''

    def __init__(self, name, kind, args=None, module=None, body=None, shortcut=None):
        self.name = name
        self.kind = kind
        self.args = dict(args or {})
        self.body = body
        self.shortcut = shortcut
        self.module = module if module is not None else self.build()

    def build(self):
        a = self.args
        if self.kind == 'conv':
            return nn.Conv2d(a['in_channels'], a['out_channels'], a['kernel_size'],
                             stride=a.get('stride', 1), padding=a.get('padding', 0), bias=a.get('bias', True))
        if self.kind == 'batchnorm':
            return nn.BatchNorm2d(a['num_features'])
        if self.kind == 'relu':
            return nn.ReLU()
        if self.kind == 'pool':
            cls = nn.MaxPool2d if a['mode'] == 'max' else nn.AvgPool2d
            return cls(a['kernel_size'], stride=a.get('stride'), padding=a.get('padding', 0))
        if self.kind == 'adaptive_pool':
            cls = nn.AdaptiveMaxPool2d if a['mode'] == 'max' else nn.AdaptiveAvgPool2d
            return cls(a['output_size'])
        if self.kind == 'flatten':
            return nn.Flatten()
        if self.kind == 'linear':
            return nn.Linear(a['in_features'], a['out_features'])
        if self.kind == 'lap':
            return LocalAttentionPool2d(a['in_channels'], LapConfig.from_dict(a['lap']))
        if self.kind == 'adaptive_lap':
            return AdaptiveLocalAttentionPool2d(a['in_channels'], a['output_size'], LapConfig.from_dict(a['lap']))
        if self.kind == 'residual':
            return ResidualBlock(self.body.to_module(), self.shortcut.to_module())
        raise GraphValidationError('Unknown layer kind %r (layer %s)' % (self.kind, self.name))

    def describe(self):
        d = {'name': self.name, 'kind': self.kind, 'args': copy.deepcopy(self.args)}
        if self.kind == 'residual':
            d['body'] = self.body.describe_layers()
            d['shortcut'] = self.shortcut.describe_layers()
        return d

    @classmethod
    def from_description(cls, d):
        if d['kind'] == 'residual':
            return cls(d['name'], 'residual', d.get('args'),
                       body=LayerGraph.from_layers(d['body']),
                       shortcut=LayerGraph.from_layers(d.get('shortcut', [])))
        return cls(d['name'], d['kind'], d.get('args'))

    def __repr__(self):
        return 'Layer(%s, %s)' % (self.name, self.kind)


class LayerGraph(object):

    ''' Ordered list of Layers plus the input shape (C, H, W). '''

    def __init__(self, layers, input_shape=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        names = [l.name for l in self.layers]
        dupes = set(n for n in names if names.count(n) > 1)
        if dupes:
            raise GraphValidationError('Duplicate layer names: %s' % ', '.join(sorted(dupes)))

    @classmethod
    def from_layers(cls, descriptions, input_shape=None):
        return cls([Layer.from_description(d) for d in descriptions], input_shape)

    @classmethod
    def from_description(cls, desc):
        return cls.from_layers(desc['layers'], desc.get('input_shape'))

    def describe_layers(self):
        return [l.describe() for l in self.layers]

    def describe(self):
        return {'input_shape': list(self.input_shape) if self.input_shape else None,
                'layers': self.describe_layers()}

    def copy(self):
        return copy.deepcopy(self)

    def to_module(self):
        return nn.Sequential(OrderedDict((l.name, l.module) for l in self.layers))

    def rebuild(self):
        ''' Re-assemble residual composites from their (possibly edited)
        body/shortcut graphs, keeping every leaf module. '''
        for l in self.layers:
            if l.kind == 'residual':
                l.body.rebuild()
                l.shortcut.rebuild()
                l.module = ResidualBlock(l.body.to_module(), l.shortcut.to_module())
        return self

    def locate(self, path):
        ''' (graph, index) of the layer at a dotted path such as "res2.conv1". '''
        parts = path.split('.')
        graph = self
        for depth, part in enumerate(parts):
            names = [l.name for l in graph.layers]
            if part not in names:
                raise PlacementError('No layer %r in graph' % path)
            idx = names.index(part)
            if depth == len(parts) - 1:
                return graph, idx
            layer = graph.layers[idx]
            if layer.kind != 'residual':
                raise PlacementError('Layer %r has no sub-layers' % '.'.join(parts[:depth + 1]))
            graph = layer.body
        raise PlacementError('Empty layer path')

    def find(self, path):
        graph, idx = self.locate(path)
        return graph.layers[idx]

    def trace(self):
        ''' Input and output shape (C, H, W) of every layer, keyed by dotted
        path, from a zero input pushed through the graph in eval mode. '''
        if self.input_shape is None:
            raise GraphValidationError('Graph has no input shape')
        shapes = OrderedDict()
        x = torch.zeros((1,) + tuple(self.input_shape))
        modules = [l.module for l in self.layers]
        states = [(m, m.training) for mod in modules for m in mod.modules()]
        try:
            for m, _ in states:
                m.training = False
            with torch.no_grad():
                self._trace(x, '', shapes)
        except (RuntimeError, GeometryError) as e:
            raise GraphValidationError('Graph is not shape-consistent: %s' % e)
        finally:
            for m, mode in states:
                m.training = mode
            for m in modules:
                for lap in lap_modules(m):
                    lap.clear()
        return shapes

    def _trace(self, x, prefix, shapes):
        for l in self.layers:
            path = prefix + l.name
            if l.kind == 'residual':
                l.body._trace(x, path + '.', shapes)
            y = l.module(x)
            shapes[path] = (tuple(x.shape[1:]), tuple(y.shape[1:]))
            x = y
        return x

    def output_shape(self):
        shapes = self.trace()
        return list(shapes.values())[-1][1] if shapes else tuple(self.input_shape)

    def validate(self):
        self.trace()
        return self

    def n_parameters(self):
        return sum(p.numel() for l in self.layers for p in l.module.parameters())

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class Placement(object):

    ''' Put a LAP at `target`. mode is one of pool, strided_conv or
    adaptive_pool; None infers it from the target's kind. '''

    def __init__(self, target, lap_config=None, mode=None):
        self.target = target
        self.lap_config = lap_config if lap_config is not None else LapConfig()
        self.mode = mode


class PlacementSpec(object):

    def __init__(self, placements=None):
        self.placements = list(placements or [])

    def validate(self, graph):
        targets = [p.target for p in self.placements]
        dupes = set(t for t in targets if targets.count(t) > 1)
        if dupes:
            raise PlacementError('Layers targeted twice: %s' % ', '.join(sorted(dupes)))
        for p in self.placements:
            layer = graph.find(p.target)
            mode = p.mode or REPLACEABLE.get(layer.kind)
            if mode is None or REPLACEABLE.get(layer.kind) != mode:
                raise PlacementError('Layer %s (%s) cannot be replaced in mode %s' % (p.target, layer.kind, mode))
            if mode == 'strided_conv':
                stride = KernelSpec.from_args(1, layer.args.get('stride', 1))
                if stride.stride_h < 2 and stride.stride_w < 2:
                    raise PlacementError('Convolution %s is not strided' % p.target)
        return self

    def __iter__(self):
        return iter(self.placements)

    def __len__(self):
        return len(self.placements)


def _replacement(layer, placement, in_channels):
    mode = placement.mode or REPLACEABLE[layer.kind]
    a = layer.args
    if mode == 'pool':
        kernel = KernelSpec.from_args(a['kernel_size'], a.get('stride') or a['kernel_size'], a.get('padding', 0))
        cfg = placement.lap_config.with_kernel(kernel)
        return [Layer(layer.name, 'lap', {'in_channels': in_channels, 'lap': cfg.to_dict()})]
    if mode == 'adaptive_pool':
        cfg = placement.lap_config.with_kernel(None)
        return [Layer(layer.name, 'adaptive_lap', {'in_channels': in_channels, 'output_size': a['output_size'],
                                                   'lap': cfg.to_dict()})]
    # strided conv -> stride-1 conv (same weights) + LAP with kernel = stride
    stride = KernelSpec.from_args(1, a['stride'])
    sh, sw = stride.stride_h, stride.stride_w
    conv_args = dict(a, stride=1)
    conv = Layer(layer.name, 'conv', conv_args)
    with torch.no_grad():
        conv.module.weight.copy_(layer.module.weight)
        if layer.module.bias is not None:
            conv.module.bias.copy_(layer.module.bias)
    cfg = placement.lap_config.with_kernel(KernelSpec(sh, sw, sh, sw, 0))
    lap = Layer(layer.name + '_lap', 'lap', {'in_channels': a['out_channels'], 'lap': cfg.to_dict()})
    return [conv, lap]


def extend_architecture(graph, spec):
    ''' A copy of `graph` with every placement of `spec` applied. Layers that
    are not targeted keep their parameters value for value; the network's
    output shape must not change. '''
    spec.validate(graph)
    new = graph.copy()
    if not len(spec):
        return new
    shapes = new.trace()
    before = list(shapes.values())[-1][1]
    for placement in spec:
        container, idx = new.locate(placement.target)
        layer = container.layers[idx]
        in_channels = shapes[placement.target][0][0]
        replacement = _replacement(layer, placement, in_channels)
        container.layers[idx:idx + 1] = replacement
        logger.info('Replaced %s (%s) with %s' % (placement.target, layer.kind,
                                                  ' + '.join(l.kind for l in replacement)))
    new.rebuild()
    after = new.output_shape()
    if tuple(after) != tuple(before):
        raise GraphValidationError('Surgery changed the output shape from %s to %s' % (before, after))
    return new


class Stage(object):

    ''' One step of a staged schedule: which parameters train, with which
    optimizer settings, for how many epochs. '''

    def __init__(self, name, trainable, optimizer='adam', lr=1e-4, weight_decay=1e-6, epochs=1):
        self.name = name
        self.trainable = [trainable] if isinstance(trainable, str) else list(trainable)
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs

    @classmethod
    def from_dict(cls, d):
        return cls(d.get('name', 'stage'), d.get('trainable', ['all']), d.get('optimizer', 'adam'),
                   d.get('lr', 1e-4), d.get('weight_decay', 1e-6), d.get('epochs', 1))


def default_recipe(block, head='head'):
    ''' Plug-into-pretrained recipe: train only the LAPs (Adam 1e-4, 2
    epochs), then fine-tune the block containing the LAP and the classifier
    (SGD 1e-3, 3 epochs). '''
    return [Stage('lap-only', ['lap'], 'adam', 1e-4, 1e-6, 2),
            Stage('finetune', [block, head], 'sgd', 1e-3, 1e-6, 3)]


def select_parameters(model, trainable):
    ''' Named parameters picked by a stage's trainable list. Entries are
    'all', 'lap' (every LAP layer), 'head' (the last linear layer) or layer
    name prefixes. '''
    named = list(model.named_parameters())
    chosen = OrderedDict()
    lap_params = set(id(p) for m in lap_modules(model) for p in m.parameters())
    linears = [m for m in model.modules() if isinstance(m, nn.Linear)]
    head_params = set(id(p) for p in linears[-1].parameters()) if linears else set()
    for entry in trainable:
        for name, p in named:
            short = name[len('body.'):] if name.startswith('body.') else name
            if (entry == 'all' or (entry == 'lap' and id(p) in lap_params)
                    or (entry == 'head' and id(p) in head_params)
                    or (entry not in ('all', 'lap', 'head') and short.startswith(entry))):
                chosen[name] = p
    return list(chosen.items())


def staged_training(model, stages, fit):
    ''' Run the stages in order. For each one, freeze everything but the
    stage's parameters and call fit(model, optimizer, epochs, stage).
    Args:
        model: the torch model.
        stages: list of Stage.
        fit: callable running the epochs, usually Trainer.fit.
    '''
    from .train import make_optimizer
    try:
        for stage in stages:
            params = select_parameters(model, stage.trainable)
            if not params:
                raise LapConfigError('Stage %s selects no trainable parameters' % stage.name,
                                     ['stages.%s.trainable' % stage.name])
            chosen = set(id(p) for _, p in params)
            for p in model.parameters():
                p.requires_grad_(id(p) in chosen)
            logger.info('Stage %s: training %d tensors for %d epochs' % (stage.name, len(params), stage.epochs))
            optimizer = make_optimizer(stage.optimizer, [p for _, p in params], stage.lr, stage.weight_decay)
            fit(model, optimizer, stage.epochs, stage.name)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return model
