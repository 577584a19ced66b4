import unittest

import torch
import torch.nn as nn

from lap.exceptions import LapConfigError
from lap.losses import LossConfig
from lap.network import build_model
from lap.synth import SynthSpec, generate
from lap.tests import small_config
from lap.train import Trainer, balanced_accuracy, concepts_map, freeze_norm_stats, make_optimizer, predict


class TestHelpers(unittest.TestCase):

    def test_optimizers(self):
        params = [nn.Parameter(torch.zeros(2))]
        self.assertIsInstance(make_optimizer('adam', params, 1e-3), torch.optim.Adam)
        sgd = make_optimizer('sgd', params, 1e-2, 1e-4)
        self.assertEqual(sgd.defaults['momentum'], 0.9)
        with self.assertRaises(LapConfigError):
            make_optimizer('lbfgs', params, 1.0)

    def test_frozen_batchnorm_stops_tracking(self):
        net = nn.Sequential(nn.Conv2d(1, 2, 3), nn.BatchNorm2d(2), nn.BatchNorm2d(2))
        for p in net[1].parameters():
            p.requires_grad = False
        net.train()
        freeze_norm_stats(net)
        self.assertFalse(net[1].training)
        self.assertTrue(net[2].training)

    def test_concepts_map(self):
        self.assertEqual(concepts_map({'0': [], '1': [0, 2]}), {0: [], 1: [0, 2]})

    def test_predict_restores_mode(self):
        model = build_model(small_config())
        model.train()
        out = predict(model, torch.rand(5, 1, 16, 16), batch_size=2)
        self.assertEqual(tuple(out.shape), (5, 2))
        self.assertTrue(model.training)


class TestTrainer(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.cfg = small_config()
        self.splits = generate(SynthSpec.from_config(self.cfg))

    def _trainer(self, cfg=None, variant=None):
        cfg = cfg or self.cfg
        model = build_model(cfg, variant)
        return Trainer(model, LossConfig.from_config(cfg['losses']), concepts_map(cfg['concepts']),
                       self.splits['train'], self.splits['val'], batch_size=16, seed=cfg['seed'])

    def test_losses_are_finite_and_differentiable(self):
        trainer = self._trainer()
        images = torch.from_numpy(self.splits['train'].images[:8])
        labels = torch.from_numpy(self.splits['train'].labels[:8])
        total, task = trainer.losses(images, labels, torch.arange(8))
        self.assertTrue(torch.isfinite(total))
        self.assertGreater(float(total), float(task))
        total.backward()
        alpha_grads = [lap.scoring.alpha.grad for lap in trainer.model.laps()]
        self.assertTrue(all(g is not None for g in alpha_grads))

    def test_bbox_supervision(self):
        cfg = small_config(losses={'supervision': 'full'})
        trainer = self._trainer(cfg)
        images = torch.from_numpy(self.splits['train'].images[:8])
        labels = torch.from_numpy(self.splits['train'].labels[:8])
        total, _ = trainer.losses(images, labels, torch.arange(8))
        self.assertTrue(torch.isfinite(total))

    def test_one_epoch(self):
        trainer = self._trainer()
        trainer.train('adam', 1e-3, 0.0, 1)
        self.assertEqual(len(trainer.history), 1)
        self.assertEqual(trainer.history[0]['stage'], 'train')
        self.assertIsNotNone(trainer.best_score)
        self.assertEqual(trainer.best_score, balanced_accuracy(trainer.model, self.splits['val']))

    def test_vanilla_model_trains(self):
        trainer = self._trainer(variant='vanilla')
        trainer.train('sgd', 1e-2, 0.0, 1)
        self.assertEqual(len(trainer.history), 1)

    def test_zero_epochs_warns(self):
        trainer = self._trainer()
        before = dict((k, v.clone()) for k, v in trainer.model.state_dict().items())
        with self.assertLogs('lap.train', 'WARNING'):
            trainer.train('adam', 1e-3, 0.0, 0)
        for k, v in trainer.model.state_dict().items():
            self.assertTrue(torch.equal(v, before[k]))

    def test_deterministic_given_seed(self):
        states = []
        for _ in range(2):
            torch.manual_seed(0)
            trainer = self._trainer()
            trainer.train('adam', 1e-3, 0.0, 1)
            states.append(trainer.model.state_dict())
        for k in states[0]:
            self.assertTrue(torch.equal(states[0][k], states[1][k]))

    def test_foreign_model(self):
        trainer = self._trainer()
        with self.assertRaises(LapConfigError):
            trainer.fit(build_model(self.cfg), None, 1)


if __name__ == '__main__':
    unittest.main()
