import unittest

import torch
import torch.nn as nn

from lap.exceptions import GraphValidationError, LapConfigError, PlacementError
from lap.losses import LossConfig
from lap.network import LapModel, build_model, model_from_description, spotnet_graph, spotresnet_graph
from lap.pooling import AdaptiveLocalAttentionPool2d, KernelSpec, LapConfig, LocalAttentionPool2d, lap_modules
from lap.surgery import (LayerGraph, Placement, PlacementSpec, Stage, default_recipe, extend_architecture,
                         select_parameters, staged_training)
from lap.synth import SynthSpec, generate_split
from lap.tests import small_config
from lap.train import Trainer


def _state(module):
    return dict((k, v.clone()) for k, v in module.state_dict().items())


class TestSurgery(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.graph = spotnet_graph((4, 8, 8), image_size=16)

    def test_empty_spec_is_a_no_op(self):
        new = extend_architecture(self.graph, PlacementSpec())
        before, after = self.graph.to_module().state_dict(), new.to_module().state_dict()
        self.assertEqual(list(before), list(after))
        for k in before:
            self.assertTrue(torch.equal(before[k], after[k]))
        self.assertEqual(new.describe(), self.graph.describe())

    def test_pool_replacement(self):
        spec = PlacementSpec([Placement('block2_pool'), Placement('block3_pool')])
        new = extend_architecture(self.graph, spec)
        self.assertEqual(new.output_shape(), self.graph.output_shape())
        laps = lap_modules(new.to_module())
        self.assertEqual(len(laps), 2)
        self.assertEqual(laps[0].kernel, KernelSpec(2))
        self.assertEqual(laps[0].in_channels, 8)
        old = self.graph.to_module().state_dict()
        kept = new.to_module().state_dict()
        for k in old:
            self.assertTrue(torch.equal(old[k], kept[k]))
        # the source graph is left alone
        self.assertEqual(self.graph.find('block2_pool').kind, 'pool')

    def test_constant_scorer_matches_average_pooling_graph(self):
        graph = spotnet_graph((4, 8, 8), image_size=16, pool='avg')
        new = extend_architecture(graph, PlacementSpec([Placement('block2_pool'), Placement('block3_pool')]))
        for lap in lap_modules(new.to_module()):
            lap.scoring.scorer.zero_()
        old_model, new_model = LapModel(graph, 'vanilla').eval(), LapModel(new).eval()
        x = torch.rand(3, 1, 16, 16)
        with torch.no_grad():
            self.assertTrue(torch.allclose(old_model(x), new_model(x), atol=1e-5))

    def test_layers_before_the_first_lap_are_untouched(self):
        new = extend_architecture(self.graph, PlacementSpec([Placement('block2_pool')]))
        old_body, new_body = self.graph.to_module().eval(), new.to_module().eval()
        cut = list(old_body._modules).index('block2_pool')
        self.assertEqual(list(new_body._modules)[:cut], list(old_body._modules)[:cut])
        x = torch.rand(2, 1, 16, 16)
        with torch.no_grad():
            self.assertTrue(torch.equal(old_body[:cut](x), new_body[:cut](x)))

    def test_only_lap_parameters_are_added(self):
        spec = PlacementSpec([Placement('block2_pool'), Placement('block3_pool')])
        new = extend_architecture(self.graph, spec)
        old_names = set(n for n, _ in self.graph.to_module().named_parameters())
        added = dict((n, p) for n, p in new.to_module().named_parameters() if n not in old_names)
        self.assertTrue(old_names <= set(n for n, _ in new.to_module().named_parameters()))
        for name in added:
            layer, rest = name.split('.', 1)
            self.assertIn(layer, ('block2_pool', 'block3_pool'))
            self.assertTrue(rest.startswith(('scoring.scorer.', 'selector.')) or rest == 'scoring.alpha', rest)
        lap_count = sum(p.numel() for m in lap_modules(new.to_module()) for p in m.parameters())
        self.assertEqual(sum(p.numel() for p in added.values()), lap_count)
        self.assertEqual(new.n_parameters() - self.graph.n_parameters(), lap_count)

    def test_strided_conv_replacement(self):
        graph = spotresnet_graph((4, 8, 8), image_size=16)
        new = extend_architecture(graph, PlacementSpec([Placement('block2.conv1', mode='strided_conv')]))
        conv = new.find('block2.conv1')
        self.assertEqual(conv.args['stride'], 1)
        self.assertTrue(torch.equal(conv.module.weight, graph.find('block2.conv1').module.weight))
        lap = new.find('block2.conv1_lap')
        self.assertEqual(lap.kind, 'lap')
        self.assertEqual(lap.module.kernel, KernelSpec(2))
        self.assertEqual(new.output_shape(), graph.output_shape())
        shapes = new.trace()
        self.assertEqual(shapes['block2.conv1_lap'], ((8, 16, 16), (8, 8, 8)))

    def test_adaptive_replacement(self):
        new = extend_architecture(self.graph, PlacementSpec([Placement('gap')]))
        self.assertIsInstance(new.find('gap').module, AdaptiveLocalAttentionPool2d)
        self.assertEqual(new.output_shape(), (2,))

    def test_odd_sizes_break_residual_shapes(self):
        graph = spotresnet_graph((4, 8), image_size=15)
        with self.assertRaises(GraphValidationError):
            extend_architecture(graph, PlacementSpec([Placement('block2.conv1')]))

    def test_bad_placements(self):
        with self.assertRaises(PlacementError):
            extend_architecture(self.graph, PlacementSpec([Placement('nowhere')]))
        with self.assertRaises(PlacementError):
            extend_architecture(self.graph, PlacementSpec([Placement('block1_conv')]))
        with self.assertRaises(PlacementError):
            extend_architecture(self.graph, PlacementSpec([Placement('head')]))
        with self.assertRaises(PlacementError):
            extend_architecture(self.graph, PlacementSpec([Placement('gap'), Placement('gap')]))

    def test_description_round_trip(self):
        new = extend_architecture(self.graph, PlacementSpec([Placement('block2_pool', LapConfig(n_heads=2))]))
        rebuilt = LayerGraph.from_description(new.describe())
        self.assertEqual(rebuilt.describe(), new.describe())
        self.assertEqual(rebuilt.output_shape(), new.output_shape())
        self.assertEqual(rebuilt.find('block2_pool').module.n_heads, 2)

    def test_duplicate_names(self):
        layers = self.graph.layers
        with self.assertRaises(GraphValidationError):
            LayerGraph(layers + layers[:1], self.graph.input_shape)


class TestModels(unittest.TestCase):

    def test_build_model_variants(self):
        cfg = small_config()
        lap_model = build_model(cfg)
        vanilla = build_model(cfg, 'vanilla')
        self.assertEqual(len(lap_model.laps()), 2)
        self.assertEqual(len(vanilla.laps()), 0)
        x = torch.rand(3, 1, 16, 16)
        self.assertEqual(tuple(lap_model(x).shape), (3, 2))
        self.assertEqual(len(lap_model.concept_maps()), 2)
        with self.assertRaises(LapConfigError):
            build_model(cfg, 'other')

    def test_resnet_and_adaptive(self):
        cfg = small_config(model={'architecture': 'spotresnet', 'adaptive_lap': True})
        model = build_model(cfg)
        self.assertEqual(len(model.laps()), 3)
        self.assertIsInstance(model.laps()[-1], AdaptiveLocalAttentionPool2d)
        self.assertEqual(tuple(model(torch.rand(2, 1, 16, 16)).shape), (2, 2))

    def test_model_from_description(self):
        model = build_model(small_config())
        twin = model_from_description(model.describe())
        twin.load_state_dict(model.state_dict())
        model.eval()
        twin.eval()
        x = torch.rand(2, 1, 16, 16)
        self.assertTrue(torch.equal(model(x), twin(x)))


class TestStagedTraining(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.model = build_model(small_config())

    def test_select_parameters(self):
        names = [n for n, _ in select_parameters(self.model, ['lap'])]
        self.assertTrue(names)
        self.assertTrue(all('_pool.' in n for n in names))
        names = [n for n, _ in select_parameters(self.model, ['head'])]
        self.assertEqual(names, ['body.head.weight', 'body.head.bias'])
        names = [n for n, _ in select_parameters(self.model, ['block1'])]
        self.assertTrue(names and all(n.startswith('body.block1_') for n in names))
        self.assertEqual(len(select_parameters(self.model, ['all'])), len(list(self.model.parameters())))

    def test_stages_freeze_everything_else(self):
        seen = []

        def fit(model, optimizer, epochs, stage):
            trainable = set(id(p) for p in model.parameters() if p.requires_grad)
            seen.append((stage, epochs, trainable, type(optimizer)))

        staged_training(self.model, default_recipe('block3'), fit)
        self.assertEqual([s[0] for s in seen], ['lap-only', 'finetune'])
        lap_ids = set(id(p) for m in self.model.laps() for p in m.parameters())
        self.assertEqual(seen[0][2], lap_ids)
        self.assertIs(seen[0][3], torch.optim.Adam)
        self.assertIs(seen[1][3], torch.optim.SGD)
        self.assertEqual(seen[1][1], 3)
        self.assertTrue(all(p.requires_grad for p in self.model.parameters()))

    def test_lap_only_stage_trains_laps_and_keeps_backbone(self):
        cfg = small_config(losses={'task_weight': 0.0, 'use_concordance': False})
        split = generate_split(SynthSpec.from_config(cfg), 'train')
        trainer = Trainer(self.model, LossConfig.from_config(cfg['losses']), {1: [0]}, split, None, 8, 0)
        images = torch.as_tensor(split.images)
        labels = torch.as_tensor(split.labels).long()
        indices = torch.arange(len(split.labels))

        def lap_loss():
            self.model.train()
            for m in self.model.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
            with torch.no_grad():
                return float(trainer.losses(images, labels, indices)[0])

        lap_ids = set(id(p) for m in self.model.laps() for p in m.parameters())
        backbone = dict((n, p.detach().clone()) for n, p in self.model.named_parameters() if id(p) not in lap_ids)
        before = lap_loss()
        staged_training(self.model, [Stage('lap-only', ['lap'], 'adam', 1e-2, 0.0, 3)], trainer.fit)
        for n, p in self.model.named_parameters():
            if n in backbone:
                self.assertTrue(torch.equal(p, backbone[n]), n)
        self.assertLess(lap_loss(), before)
        self.assertEqual([h['stage'] for h in trainer.history], ['lap-only'] * 3)

    def test_empty_stage_is_rejected(self):
        with self.assertRaises(LapConfigError):
            staged_training(self.model, [Stage('nothing', ['no_such_layer'])], lambda *a: None)
        self.assertTrue(all(p.requires_grad for p in self.model.parameters()))

    def test_stage_from_dict(self):
        stage = Stage.from_dict({'name': 's', 'trainable': 'lap', 'optimizer': 'sgd', 'lr': 0.01, 'epochs': 4})
        self.assertEqual(stage.trainable, ['lap'])
        self.assertEqual(stage.epochs, 4)


class TestResidualShapes(unittest.TestCase):

    def test_trace_covers_sub_layers(self):
        graph = spotresnet_graph((4, 8), image_size=8)
        shapes = graph.trace()
        self.assertIn('block2.conv1', shapes)
        self.assertEqual(shapes['block2'], ((4, 8, 8), (8, 4, 4)))
        self.assertIsInstance(LapModel(graph).body, nn.Sequential)
        self.assertIsInstance(LocalAttentionPool2d(4, LapConfig()), nn.Module)


if __name__ == '__main__':
    unittest.main()
