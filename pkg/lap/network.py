''' Desk-scale architectures used by the command line tools and the tests. '''

import logging

import torch.nn as nn

from .exceptions import LapConfigError
from .pooling import LapConfig, lap_modules
from .surgery import Layer, LayerGraph, Placement, PlacementSpec, extend_architecture

logger = logging.getLogger(__name__)


class LapModel(nn.Module):

    ''' A torch model assembled from a LayerGraph. After every forward pass,
    concept_maps() returns the maps each LAP used for that very pass. '''

    def __init__(self, graph, variant='lap'):
        super(LapModel, self).__init__()
        self.graph = graph
        self.variant = variant
        self.body = graph.to_module()

    def forward(self, x):
        return self.body(x)

    def laps(self):
        return lap_modules(self.body)

    def concept_maps(self):
        return [m.concept_maps for m in self.laps()]

    def selector_maps(self):
        return [m.selector_maps for m in self.laps()]

    def describe(self):
        return self.graph.describe()


def _conv_block(b, c_in, c_out, stride=1):
    return [Layer('block%d_conv' % b, 'conv', {'in_channels': c_in, 'out_channels': c_out,
                                              'kernel_size': 3, 'stride': stride, 'padding': 1}),
            Layer('block%d_bn' % b, 'batchnorm', {'num_features': c_out}),
            Layer('block%d_relu' % b, 'relu')]


def _classifier(c_in, n_classes):
    return [Layer('gap', 'adaptive_pool', {'mode': 'avg', 'output_size': 1}),
            Layer('flatten', 'flatten'),
            Layer('head', 'linear', {'in_features': c_in, 'out_features': n_classes})]


def spotnet_graph(channels=(16, 32, 64), in_channels=1, image_size=64, n_classes=2, pool='max'):
    ''' Plain CNN: one conv/bn/relu/2x2-pool block per entry of `channels`,
    then global average pooling and a linear classifier. '''
    layers = []
    c_in = in_channels
    for b, c in enumerate(channels, 1):
        layers += _conv_block(b, c_in, c)
        layers.append(Layer('block%d_pool' % b, 'pool', {'mode': pool, 'kernel_size': 2, 'stride': 2}))
        c_in = c
    layers += _classifier(c_in, n_classes)
    return LayerGraph(layers, (in_channels, image_size, image_size))


def spotresnet_graph(channels=(16, 32, 64), in_channels=1, image_size=64, n_classes=2):
    ''' Small residual network: a stem conv, then one residual block per extra
    channel width whose first conv (and shortcut) downsample with stride 2. '''
    layers = [Layer('stem_conv', 'conv', {'in_channels': in_channels, 'out_channels': channels[0],
                                          'kernel_size': 3, 'stride': 1, 'padding': 1}),
              Layer('stem_bn', 'batchnorm', {'num_features': channels[0]}),
              Layer('stem_relu', 'relu')]
    c_in = channels[0]
    for b, c in enumerate(channels[1:], 2):
        body = LayerGraph([
            Layer('conv1', 'conv', {'in_channels': c_in, 'out_channels': c, 'kernel_size': 3,
                                    'stride': 2, 'padding': 1}),
            Layer('bn1', 'batchnorm', {'num_features': c}),
            Layer('relu1', 'relu'),
            Layer('conv2', 'conv', {'in_channels': c, 'out_channels': c, 'kernel_size': 3,
                                    'stride': 1, 'padding': 1}),
            Layer('bn2', 'batchnorm', {'num_features': c})])
        shortcut = LayerGraph([
            Layer('conv', 'conv', {'in_channels': c_in, 'out_channels': c, 'kernel_size': 1,
                                   'stride': 2, 'padding': 0, 'bias': False}),
            Layer('bn', 'batchnorm', {'num_features': c})])
        layers.append(Layer('block%d' % b, 'residual', body=body, shortcut=shortcut))
        c_in = c
    layers += _classifier(c_in, n_classes)
    return LayerGraph(layers, (in_channels, image_size, image_size))


def lap_config_from(section, heads=None):
    return LapConfig(n_heads=section['n_heads'], hidden_channels=section['hidden_channels'],
                     aggregation=section['aggregation'], alpha_init=section['alpha_init'],
                     epsilon=section['epsilon'], use_selector=section['use_selector'], heads=heads)


def placements_for(cfg, graph):
    ''' LAP placements requested by the `model` section for a given graph. '''
    model = cfg['model']
    lap_cfg = lap_config_from(cfg['lap'])
    placements = []
    for b in model['lap_blocks']:
        if model['architecture'] == 'spotnet':
            placements.append(Placement('block%d_pool' % b, lap_cfg, 'pool'))
        else:
            placements.append(Placement('block%d.conv1' % b, lap_cfg, 'strided_conv'))
    if model['adaptive_lap']:
        placements.append(Placement('gap', lap_cfg, 'adaptive_pool'))
    for p in placements:
        graph.find(p.target)
    return PlacementSpec(placements)


def build_graph(cfg):
    ''' Plain (vanilla) graph of the configured architecture. '''
    model, data = cfg['model'], cfg['data']
    builders = {'spotnet': spotnet_graph, 'spotresnet': spotresnet_graph}
    if model['architecture'] not in builders:
        raise LapConfigError('Unknown architecture %r' % model['architecture'], ['model.architecture'])
    return builders[model['architecture']](model['channels'], 1, data['image_size'], model['n_classes'])


def build_model(cfg, variant=None):
    ''' Model described by a config: the vanilla graph, extended with LAPs
    unless the variant is 'vanilla'. '''
    variant = variant or cfg['model']['variant']
    if variant not in ('lap', 'vanilla'):
        raise LapConfigError('Unknown model variant %r' % variant, ['model.variant'])
    graph = build_graph(cfg)
    if variant == 'lap':
        graph = extend_architecture(graph, placements_for(cfg, graph))
    logger.info('Built %s %s model with %d parameters' % (variant, cfg['model']['architecture'], graph.n_parameters()))
    return LapModel(graph, variant)


def model_from_description(desc, variant='lap'):
    return LapModel(LayerGraph.from_description(desc), variant)
