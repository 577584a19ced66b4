''' Desk-scale experiments on the default synthetic dataset. They train real
models for several minutes each, so they only run with LAP_SLOW_TESTS=1. '''

import os
import shutil
import tempfile
import unittest
from os.path import join

import numpy as np

from lap import config
from lap.cli import cmd_evaluate, cmd_generate, cmd_train
from lap.export import format_report

SEEDS = (0, 1, 2)
KS = [0.1, 0.3, 0.5, 0.7, 0.9]


def _config(seed, variant='lap'):
    return config.merge_config({'seed': seed, 'model': {'variant': variant}, 'evaluate': {'ks': KS}})


@unittest.skipUnless(os.environ.get('LAP_SLOW_TESTS') == '1', 'set LAP_SLOW_TESTS=1 to run')
class TestSyntheticExperiment(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dir = tempfile.mkdtemp()
        cls.data = join(cls.dir, 'data')
        cmd_generate(_config(0), cls.data)
        cls.reports = {}
        for variant in ('lap', 'vanilla'):
            for seed in SEEDS:
                cfg = _config(seed, variant)
                out = join(cls.dir, '%s-%d' % (variant, seed))
                checkpoint = cmd_train(cfg, cls.data, out)
                cls.reports[variant, seed] = cmd_evaluate(cfg, checkpoint, data=cls.data, out=out)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir)

    def _median(self, variant, key):
        return float(np.median([self.reports[variant, s][key] for s in SEEDS]))

    def test_no_accuracy_loss_against_vanilla_twin(self):
        lap = self._median('lap', 'test_balanced_accuracy')
        vanilla = self._median('vanilla', 'test_balanced_accuracy')
        self.assertGreaterEqual(lap, vanilla - 0.02)

    def test_localization(self):
        for seed in SEEDS:
            report = self.reports['lap', seed]
            self.assertGreaterEqual(report['iou_global_threshold'], 0.30)
            self.assertGreaterEqual(report['iou_global_threshold'], 1.5 * report['random_iou_top_scored'])

    def test_deeper_laps_predict_better(self):
        self.assertGreaterEqual(self._median('lap', 'lap2_predictivity'), self._median('lap', 'lap1_predictivity'))

    def test_lap_curve_dominates_random(self):
        for seed in SEEDS:
            report = self.reports['lap', seed]
            for k in KS:
                self.assertGreaterEqual(report['faithfulness_lap_top1_k%.2f' % k],
                                        report['faithfulness_random_top1_k%.2f' % k], 'seed %d k %.2f' % (seed, k))
                self.assertGreaterEqual(report['faithfulness_oracle_top1_k%.2f' % k],
                                        report['faithfulness_random_top1_k%.2f' % k])

    def test_reports_are_reproducible(self):
        cfg = _config(0)
        out = join(self.dir, 'lap-0-again')
        checkpoint = cmd_train(cfg, self.data, out)
        again = cmd_evaluate(cfg, checkpoint, data=self.data, out=out)
        self.assertEqual(format_report(again), format_report(self.reports['lap', 0]))


if __name__ == '__main__':
    unittest.main()
