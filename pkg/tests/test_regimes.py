"""Tests on regime construction and the synthetic benchmark"""
from unittest import TestCase

import numpy as np

from pyspml.exceptions import CalibrationError, ConfigValidationError, RegimeError
from pyspml.labelspace import AssetRecord, Dataset, LabelState
from pyspml.regimes import (
    GeneratorConfig,
    PriorSimConfig,
    RegimeKind,
    apply_checklist_prior,
    apply_geo_prior,
    apply_regime,
    flatten,
    gen_synthetic_assets,
    known_negative_fraction,
    make_target_only,
    regime_stats,
    simulate_context_priors,
)
from .utils import asset_dataset, flat_dataset

T, F = True, False


def labels_row(M, positives):
    row = [0] * M
    for c in positives:
        row[c] = 1
    return row


class TargetOnlyTestCase(TestCase):
    def test_asset_clips_without_target_dropped(self):
        M = 8
        dataset = asset_dataset(
            [(3, [T] * M, [T] * M, [labels_row(M, {3, 7}), labels_row(M, {7}), labels_row(M, {3})])],
            M,
        )
        result = make_target_only(dataset)
        self.assertEqual([c.order_index for c in result.clips], [0, 2])
        expected = [-1] * M
        expected[3] = 1
        for row in result.label_matrix:
            self.assertEqual(row.tolist(), expected)
        self.assertEqual(result.meta.regime, "TargetOnly")

    def test_flat_single_positive(self):
        dataset = flat_dataset([labels_row(5, {2}), labels_row(5, {})])
        for seed in range(5):
            result = make_target_only(dataset, seed=seed)
            self.assertEqual(len(result), 1)
            self.assertEqual(result.label_matrix[0].tolist(), [-1, -1, 1, -1, -1])

    def test_flat_uniform_sampling(self):
        n = 30000
        dataset = flat_dataset(np.array([labels_row(10, {1, 4, 9})] * n), np.zeros((n, 1)))
        result = make_target_only(dataset, seed=11)
        chosen = np.argmax(result.label_matrix, axis=1)
        for c in (1, 4, 9):
            self.assertAlmostEqual(np.mean(chosen == c), 1 / 3, delta=0.02)

    def test_single_positive_invariant(self):
        dataset, _ = gen_synthetic_assets(GeneratorConfig(M=20, A=40, seed=2))
        for kind in (RegimeKind.TARGET_ONLY, RegimeKind.GEO, RegimeKind.CHECKLIST):
            labels = apply_regime(dataset, kind).label_matrix
            self.assertTrue(np.all(np.sum(labels == 1, axis=1) == 1))

    def test_deterministic(self):
        dataset = flat_dataset(np.ones((50, 4), dtype=np.int8))
        first = make_target_only(dataset, seed=4)
        second = make_target_only(dataset, seed=4)
        self.assertEqual(first, second)


class PriorTestCase(TestCase):
    def target_only(self, possible, observed, M=5):
        row = [-1] * M
        row[0] = 1
        return asset_dataset([(0, possible, observed, [row, row])], M)

    def test_geo_mask(self):
        dataset = self.target_only([T, T, F, F, T], [T] * 5)
        result = apply_geo_prior(dataset)
        self.assertEqual(result.label_matrix[0].tolist(), [1, -1, 0, 0, -1])
        self.assertEqual(result.meta.regime, "Geo")

    def test_geo_vacuous(self):
        dataset = self.target_only([T] * 5, [T] * 5)
        np.testing.assert_array_equal(apply_geo_prior(dataset).label_matrix, dataset.label_matrix)

    def test_checklist_equal_masks(self):
        mask = [T, F, T, F, T]
        dataset = self.target_only(mask, mask)
        np.testing.assert_array_equal(
            apply_checklist_prior(dataset).label_matrix,
            apply_geo_prior(dataset).label_matrix,
        )

    def test_checklist_intersection(self):
        dataset = self.target_only([T, T, F, F, T], [T] * 5)
        np.testing.assert_array_equal(
            apply_checklist_prior(dataset).label_matrix,
            apply_geo_prior(dataset).label_matrix,
        )
        dataset = self.target_only([T, T, F, T, T], [T, F, T, T, F])
        self.assertEqual(apply_checklist_prior(dataset).label_matrix[0].tolist(), [1, 0, 0, -1, 0])

    def test_inconsistent_metadata(self):
        dataset = self.target_only([T] * 5, [T] * 5)
        asset = dataset.assets[0]
        broken = AssetRecord(
            asset.asset_id, asset.target_class, asset.clip_ids, (F, T, T, T, T), asset.observed_mask
        )
        dataset = Dataset(dataset.meta, (broken,), dataset.clips)
        with self.assertRaises(RegimeError):
            apply_geo_prior(dataset)

    def test_flat_rejected(self):
        with self.assertRaises(RegimeError):
            apply_geo_prior(flat_dataset([[1, -1]]))


class GeneratorTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = GeneratorConfig(M=100, A=300, seed=0)
        cls.dataset, cls.truth = gen_synthetic_assets(cls.cfg)

    def test_deterministic(self):
        cfg = GeneratorConfig(M=10, A=20, seed=9)
        first, _ = gen_synthetic_assets(cfg)
        second, _ = gen_synthetic_assets(cfg)
        self.assertEqual(first, second)

    def test_fully_labelled(self):
        self.assertTrue(self.dataset.fully_labeled.all())
        self.assertEqual(self.dataset.meta.regime, "Full")

    def test_geo_negatives(self):
        stats = regime_stats(apply_regime(self.dataset, RegimeKind.GEO))
        self.assertGreaterEqual(stats.mean_neg, 37)
        self.assertLessEqual(stats.mean_neg, 47)
        self.assertEqual(stats.mean_pos, 1)

    def test_checklist_negatives(self):
        stats = regime_stats(apply_regime(self.dataset, RegimeKind.CHECKLIST))
        self.assertGreaterEqual(stats.mean_neg, 74)
        self.assertLessEqual(stats.mean_neg, 84)

    def test_regimes_nest(self):
        kinds = (RegimeKind.TARGET_ONLY, RegimeKind.GEO, RegimeKind.CHECKLIST)
        regimes = [apply_regime(self.dataset, kind, seed=3) for kind in kinds]
        clip_ids = [[clip.clip_id for clip in dataset.clips] for dataset in regimes]
        self.assertEqual(clip_ids[0], clip_ids[1])
        self.assertEqual(clip_ids[1], clip_ids[2])
        negatives = [dataset.label_matrix == LabelState.NEGATIVE for dataset in regimes]
        positives = [dataset.label_matrix == LabelState.POSITIVE for dataset in regimes]
        self.assertFalse(negatives[0].any())
        self.assertFalse((negatives[0] & ~negatives[1]).any())
        self.assertFalse((negatives[1] & ~negatives[2]).any())
        np.testing.assert_array_equal(positives[0], positives[1])
        np.testing.assert_array_equal(positives[1], positives[2])

    def test_priors_keep_true_positives(self):
        rows = {clip.clip_id: row for row, clip in enumerate(self.dataset.clips)}
        truth = self.dataset.label_matrix == LabelState.POSITIVE
        for kind in (RegimeKind.GEO, RegimeKind.CHECKLIST):
            labelled = apply_regime(self.dataset, kind, seed=3)
            present = truth[[rows[clip.clip_id] for clip in labelled.clips]]
            marked = labelled.label_matrix == LabelState.NEGATIVE
            self.assertFalse((marked & present).any(), kind.value)

    def test_background_recurrence(self):
        labels = self.dataset.label_matrix
        present, total = 0, 0
        for row, asset_row in enumerate(self.dataset.asset_rows):
            community = list(self.truth.communities[asset_row])
            present += int(np.sum(labels[row, community] == 1))
            total += len(community)
        self.assertAlmostEqual(present / total, 0.28, delta=0.02)

    def test_confusable_pairs_live_apart(self):
        cfg = GeneratorConfig(M=20, A=10, confusable_pairs=5, regions=4, seed=1)
        _, truth = gen_synthetic_assets(cfg)
        for a, b in truth.confusable:
            self.assertNotEqual(truth.home_region[a], truth.home_region[b])
        for r, members in enumerate(truth.regions):
            for c in range(20):
                if truth.home_region[c] == r:
                    self.assertIn(c, members)

    def test_config_validation(self):
        with self.assertRaises(ConfigValidationError):
            GeneratorConfig(p_bg=1.5)
        with self.assertRaises(ConfigValidationError):
            GeneratorConfig(M=10, confusable_pairs=6)
        with self.assertRaises(ConfigValidationError):
            GeneratorConfig.from_config({"species": 3})


class ContextPriorTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.full, _ = gen_synthetic_assets(GeneratorConfig(M=20, A=150, seed=4))
        cls.flat = make_target_only(flatten(cls.full), seed=0)

    def check(self, fraction):
        cfg = PriorSimConfig(target_known_negative_fraction=fraction, seed=3)
        result = simulate_context_priors(self.flat, self.full, cfg)
        self.assertAlmostEqual(known_negative_fraction(result), fraction, delta=0.02)
        truth = self.full.label_matrix[[self.full.clip_index[c.clip_id] for c in result.clips]]
        self.assertFalse(np.any((result.label_matrix == 0) & (truth == 1)))
        self.assertTrue(np.all(np.sum(result.label_matrix == 1, axis=1) == 1))
        self.assertEqual(result.meta.regime, "ContextPrior")
        return result

    def test_low_fraction(self):
        self.check(0.45)

    def test_high_fraction(self):
        self.check(0.83)

    def test_deterministic(self):
        self.assertEqual(self.check(0.45), self.check(0.45))

    def test_base_rate_scores(self):
        cfg = PriorSimConfig(target_known_negative_fraction=0.45, ridge_lambda=float("inf"))
        result = simulate_context_priors(self.flat, self.full, cfg)
        self.assertAlmostEqual(known_negative_fraction(result), 0.45, delta=0.02)

    def test_unreachable(self):
        cfg = PriorSimConfig(target_known_negative_fraction=0.99)
        with self.assertRaises(CalibrationError):
            simulate_context_priors(self.flat, self.full, cfg)


class StatsTestCase(TestCase):
    def test_counts(self):
        stats = regime_stats(flat_dataset([[1, 0, -1], [1, -1, -1]]))
        self.assertEqual(stats.n_examples, 2)
        self.assertEqual(stats.mean_pos, 1.0)
        self.assertEqual(stats.mean_neg, 0.5)
        self.assertEqual(stats.mean_unk, 1.5)
        self.assertEqual((stats.min_unk, stats.max_unk), (1, 2))
        self.assertEqual(stats.as_row("train", "Geo")[:3], ["train", "Geo", 1.0])
