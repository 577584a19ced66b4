import os
import shutil
import tempfile
import unittest

import numpy as np
import pandas as pd
import torch

from lap.evaluate import (binarize, binarize_top_scored, box_mask, faithfulness_curve, fit_global_threshold, iou,
                          keep_count, keep_top_pixels, mean_iou, normalize_map, oracle_score_maps,
                          lap_score_maps, plot_faithfulness_curves, predictivity_and_faithfulness,
                          random_score_maps)
from lap.exceptions import LapArgumentError, ThresholdFitError
from lap.interpret import InterpretationStack, integrate_stack
from lap.losses import ConceptAnnotation
from lap.network import build_model
from lap.pooling import ConceptMaps, KernelSpec
from lap.tests import small_config


class TestNormalization(unittest.TestCase):

    def test_normalize(self):
        m = np.array([[0.2, 1.0], [0.5, 0.0]])
        self.assertTrue(np.array_equal(normalize_map(m), m))
        self.assertTrue(np.allclose(normalize_map(m * 7), normalize_map(m)))
        self.assertTrue(np.array_equal(normalize_map(np.zeros((2, 2))), np.zeros((2, 2))))
        n = normalize_map(m * 3)
        self.assertTrue(np.allclose(normalize_map(n), n))

    def test_normalize_stack_per_map(self):
        maps = np.stack([np.full((2, 2), 2.0), np.zeros((2, 2))])
        out = normalize_map(maps)
        self.assertTrue(np.array_equal(out[0], np.ones((2, 2))))
        self.assertTrue(np.array_equal(out[1], np.zeros((2, 2))))


class TestThreshold(unittest.TestCase):

    def test_perfect_separation(self):
        maps = [np.array([[1.0, 1.0], [0.0, 0.0]])]
        masks = [np.array([[True, True], [False, False]])]
        t = fit_global_threshold(maps, masks)
        self.assertTrue(0 < t < 1)
        self.assertTrue(np.array_equal(binarize(maps[0], t), masks[0]))

    def test_separable_bands(self):
        rng = np.random.default_rng(0)
        pos, neg = rng.uniform(0.6, 1.0, 500), rng.uniform(0.0, 0.4, 1500)
        maps = [np.concatenate([pos, neg]).reshape(40, 50)]
        masks = [np.concatenate([np.ones(500, bool), np.zeros(1500, bool)]).reshape(40, 50)]
        t = fit_global_threshold(maps, masks)
        self.assertTrue(0.4 <= t <= 0.6)

    def test_swapped_labels_on_symmetric_data(self):
        maps = [np.array([[0.0, 0.25, 0.75, 1.0]])]
        masks = [np.array([[False, False, True, True]])]
        with self.assertLogs('lap.evaluate', 'WARNING'):
            swapped = fit_global_threshold(maps, [~masks[0]])
        self.assertAlmostEqual(fit_global_threshold(maps, masks), swapped, places=6)

    def test_single_class(self):
        with self.assertRaises(ThresholdFitError):
            fit_global_threshold([np.random.rand(3, 3)], [np.zeros((3, 3), bool)])
        with self.assertRaises(ThresholdFitError):
            fit_global_threshold([], [])


class TestBinarization(unittest.TestCase):

    def test_threshold_binarization(self):
        m = np.array([[0.1, 0.5], [0.6, 0.0]])
        self.assertTrue(binarize(m + 0.01, 0).all())
        self.assertEqual(binarize(m, 0.5).sum(), 1)

    def test_top_scored(self):
        m = np.array([[0.1, 0.9], [0.9, 0.3]])
        self.assertFalse(binarize_top_scored(m, 0).any())
        self.assertEqual(binarize_top_scored(m, 1).tolist(), [[False, True], [False, False]])
        self.assertEqual(binarize_top_scored(m, 4).sum(), 4)
        with self.assertRaises(LapArgumentError):
            binarize_top_scored(m, 5)

    def test_gap_equivalence(self):
        rng = np.random.default_rng(1)
        m = np.where(rng.random((8, 8)) > 0.7, rng.uniform(0.6, 1.0, (8, 8)), rng.uniform(0.0, 0.4, (8, 8)))
        area = int((m > 0.5).sum())
        self.assertTrue(np.array_equal(binarize_top_scored(m, area), binarize(m, 0.5)))


class TestIoU(unittest.TestCase):

    def test_iou(self):
        a = np.array([[True, True, False]])
        b = np.array([[False, True, True]])
        self.assertAlmostEqual(iou(a, b), 1.0 / 3)
        self.assertEqual(iou(a, a), 1.0)
        self.assertEqual(iou(a, ~a), 0.0)
        self.assertEqual(iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)), 1.0)
        self.assertEqual(iou(a, b), iou(b, a))
        with self.assertRaises(LapArgumentError):
            iou(a, np.zeros((2, 2), bool))

    def test_mean_iou_modes(self):
        masks = np.zeros((2, 4, 4), bool)
        masks[:, :2, :2] = True
        oracle = oracle_score_maps(masks)
        self.assertEqual(mean_iou(oracle, masks), 1.0)
        self.assertEqual(mean_iou(oracle, masks, 0.5), 1.0)
        rand = random_score_maps(2, (4, 4), seed=0)
        self.assertLess(mean_iou(rand, masks), 1.0)
        self.assertTrue(np.array_equal(rand, random_score_maps(2, (4, 4), seed=0)))

    def test_box_mask(self):
        ann = ConceptAnnotation('a', [0], {0: [(1, 0, 2, 3)]})
        mask = box_mask(ann, (4, 4))
        self.assertEqual(mask.sum(), 6)
        self.assertTrue(mask[0:3, 1:3].all())
        self.assertFalse(box_mask(ann, (4, 4), concept=1).any())


class TestRanking(unittest.TestCase):

    def _stack(self):
        shallow = torch.tensor([[[0.1, 0.4], [0.2, 0.3]]], dtype=torch.float64)
        deep = torch.tensor([[[0.3]]], dtype=torch.float64)
        return InterpretationStack([(ConceptMaps(shallow, shallow), KernelSpec(2)), (ConceptMaps(deep, deep), None)],
                                   (2, 2), 0.8)

    def test_ranking_keeps_order_below_half(self):
        mask = np.zeros((1, 2, 2), bool)
        mask[0, 0, 1] = True
        stack = self._stack()
        ranked = lap_score_maps(stack)
        self.assertEqual(ranked.shape, (1, 2, 2))
        self.assertEqual(mean_iou(ranked, mask), 1.0)
        self.assertEqual(mean_iou(integrate_stack(stack).numpy()[None], mask), 0.0)

    def test_keep_one_pixel_follows_ranking(self):
        images = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2) + 1
        kept = keep_top_pixels(images, lap_score_maps(self._stack()), 0.25)
        self.assertEqual(np.argwhere(np.asarray(kept)[0, 0] != 0).tolist(), [[0, 1]])


class TestAccuracies(unittest.TestCase):

    def test_predictivity_and_faithfulness(self):
        labels = np.array([0, 1, 1, 0])
        self.assertEqual(predictivity_and_faithfulness(labels, labels, labels), (1.0, 1.0))
        self.assertEqual(predictivity_and_faithfulness(1 - labels, 1 - labels, labels), (0.0, 1.0))
        with self.assertRaises(LapArgumentError):
            predictivity_and_faithfulness(labels, labels[:3], labels)

    def test_random_assignments(self):
        rng = np.random.default_rng(0)
        a, b, c = rng.integers(0, 2, (3, 10000))
        pred, faith = predictivity_and_faithfulness(a, b, c)
        self.assertAlmostEqual(pred, 0.5, delta=0.02)
        self.assertAlmostEqual(faith, 0.5, delta=0.02)


class TestFaithfulness(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.model = build_model(small_config())
        self.images = torch.rand(6, 1, 16, 16)
        self.maps = random_score_maps(6, (16, 16), seed=1)

    def test_full_keep_agrees_with_itself(self):
        curve = faithfulness_curve(self.model, self.images, self.maps, [0.1, 1.0])
        self.assertEqual([p['k'] for p in curve], [0.1, 1.0])
        self.assertEqual(curve[-1]['top1'], 1.0)
        self.assertEqual(curve[-1]['top5'], 1.0)

    def test_ground_truth_mode(self):
        labels = np.zeros(6, dtype=np.int64)
        curve = faithfulness_curve(self.model, self.images, self.maps, [1.0], labels, 'ground_truth')
        from lap.train import predict
        expected = float(np.mean(predict(self.model, self.images).argmax(1).numpy() == 0))
        self.assertAlmostEqual(curve[0]['top1'], expected)
        with self.assertRaises(LapArgumentError):
            faithfulness_curve(self.model, self.images, self.maps, [1.0], None, 'ground_truth')

    def test_bad_arguments(self):
        with self.assertRaises(LapArgumentError):
            faithfulness_curve(self.model, self.images, self.maps, [])
        with self.assertRaises(LapArgumentError):
            faithfulness_curve(self.model, self.images, self.maps, [0.0])
        with self.assertRaises(LapArgumentError):
            faithfulness_curve(self.model, self.images, self.maps[:3], [0.5])

    def test_keep_pixels(self):
        self.assertEqual(keep_count(0.1, 10), 1)
        self.assertEqual(keep_count(0.01, 10), 1)
        self.assertEqual(keep_count(0.3, 10), 3)
        kept = keep_top_pixels(torch.ones(2, 1, 4, 4), random_score_maps(2, (4, 4)), 0.25)
        self.assertEqual(kept.sum(), 8)

    def test_plot(self):
        out = tempfile.mkdtemp()
        try:
            data = pd.DataFrame([{'method': 'lap', 'mode': 'prediction', 'k': 0.1, 'top1': 0.5, 'top5': 1.0},
                                 {'method': 'lap', 'mode': 'prediction', 'k': 0.5, 'top1': 0.8, 'top5': 1.0}])
            path = os.path.join(out, 'curves.png')
            plot_faithfulness_curves(data, path)
            self.assertTrue(os.path.exists(path))
        finally:
            shutil.rmtree(out)


if __name__ == '__main__':
    unittest.main()
