"""Tests on the training loop, checkpoints, sweeps and presets"""
import csv
import json
import os
import tempfile
from unittest import TestCase, mock

import numpy as np
from numpy.testing import assert_allclose

from pyspml.exceptions import ConfigValidationError, LossConfigurationError, TrainingError
from pyspml.labelspace import save_manifest
from pyspml.losses import RoleState
from pyspml.presets import PRESETS, apply_preset, preset_values
from pyspml.regimes import GeneratorConfig, RegimeKind, apply_regime, gen_synthetic_assets
from pyspml.regularizers import PseudoTargetStore
from pyspml.trainer import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    lr_sweep,
    run_experiment,
    save_checkpoint,
    sweep,
    train,
)
from pyspml.utils import merge
from .utils import flat_dataset, separable_dataset


def make_config(**sections):
    base = {
        'model': {'hidden': [], 'seed': 0},
        'loss': {'kind': 'AN'},
        'train': {'epochs': 5, 'batch_size': 8, 'base_lr': 1e-2, 'seed': 0},
    }
    return merge(sections, base)


def synthetic(seed=0):
    full, _ = gen_synthetic_assets(
        GeneratorConfig(M=6, A=12, D=8, clips_per_asset=(2, 3), regions=2, seed=seed)
    )
    return apply_regime(full, RegimeKind.TARGET_ONLY), full



def signal_dataset(seed, n=120, D=16, M=4):
    """Class c is present when feature c exceeds 0.5"""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, D))
    return flat_dataset((features[:, :M] > 0.5).astype(np.int8), features)

class TrainConfigTestCase(TestCase):
    def test_defaults(self):
        config = TrainConfig.from_config({})
        self.assertEqual(config.model['hidden'], [128])
        self.assertEqual(config.spec.kind.value, 'AN')
        self.assertEqual(config.reg_kind.value, 'none')
        self.assertIsNone(config.data)

    def test_unknown_section(self):
        with self.assertRaises(ConfigValidationError):
            TrainConfig.from_config({'optimizer': {}})

    def test_requires_data(self):
        with self.assertRaises(ConfigValidationError):
            TrainConfig.from_config({}, require_data=True)

    def test_document(self):
        config = TrainConfig.from_config(make_config())
        again = TrainConfig.from_config(config.to_document())
        self.assertEqual(again.to_document(), config.to_document())


class TrainerTestCase(TestCase):
    def test_deterministic(self):
        train_set, val_set = synthetic()
        config = make_config(model={'hidden': [4]}, loss={'kind': 'LLCp', 'delta_rel': 20.0})
        first, record1 = train(config, train_set, val_set)
        second, record2 = train(config, train_set, val_set)
        self.assertEqual(record1.train_loss, record2.train_loss)
        self.assertEqual(record1.val_map, record2.val_map)
        for (w1, b1), (w2, b2) in zip(first.layers, second.layers):
            assert_allclose(w1, w2, rtol=0)
            assert_allclose(b1, b2, rtol=0)

    def test_seed_changes_order(self):
        train_set, _ = synthetic()
        _, first = train(make_config(), train_set)
        _, second = train(make_config(train={'seed': 1}), train_set)
        self.assertNotEqual(first.train_loss, second.train_loss)

    def test_separable(self):
        dataset = separable_dataset()
        config = make_config(loss={'kind': 'BCEFull'}, train={'epochs': 20})
        params, record = train(config, dataset, dataset)
        self.assertLess(record.train_loss[-1], record.train_loss[0])
        self.assertGreater(record.best_val_map, 0.99)
        self.assertEqual(params.dims, (2, 2))

    def test_assume_negative_matches_full_bce(self):
        dataset = separable_dataset()
        _, full = train(make_config(loss={'kind': 'BCEFull'}), dataset)
        _, an = train(make_config(loss={'kind': 'AN'}), dataset)
        assert_allclose(an.train_loss, full.train_loss, rtol=0, atol=1e-12)

    def test_full_bce_needs_full_labels(self):
        train_set, _ = synthetic()
        with self.assertRaises(LossConfigurationError):
            Trainer(make_config(loss={'kind': 'BCEFull'}), train_set)

    def test_regularizer_needs_assets(self):
        with self.assertRaises(ConfigValidationError):
            Trainer(make_config(reg={'kind': 'rp'}), separable_dataset())

    def test_empty(self):
        with self.assertRaises(TrainingError):
            Trainer(make_config(), flat_dataset(np.zeros((0, 2), dtype=np.int8)))

    def test_non_finite(self):
        features = np.zeros((4, 2))
        features[2, 0] = np.nan
        dataset = flat_dataset(np.eye(2, dtype=np.int8)[[0, 1, 0, 1]], features)
        with self.assertRaises(TrainingError) as context:
            train(make_config(), dataset)
        self.assertIn('epoch=1', str(context.exception))

    def test_asset_regularizers(self):
        train_set, _ = synthetic()
        for kind in ('rp', 're'):
            config = make_config(model={'hidden': [4]}, reg={'kind': kind, 'alpha': 0.1, 'eps_ema': 0.1})
            trainer = Trainer(config, train_set)
            before = trainer.pseudo.y_bar.copy(), trainer.pseudo.d_bar.copy()
            trainer.fit()
            if kind == 'rp':
                self.assertFalse(np.allclose(trainer.pseudo.y_bar, before[0]))
                assert_allclose(trainer.pseudo.d_bar, before[1])
            else:
                assert_allclose(trainer.pseudo.y_bar, before[0])
                self.assertTrue(trainer.pseudo.d_bar.any())

    def test_rp_without_ema_is_frozen(self):
        train_set, _ = synthetic()
        fixed = make_config(reg={'kind': 'rp', 'alpha': 0.5, 'eps_ema': 0.0})
        moving = make_config(reg={'kind': 'rp', 'alpha': 0.5, 'eps_ema': 0.3})
        _, record = train(fixed, train_set)
        with mock.patch.object(PseudoTargetStore, 'update') as update:
            _, frozen = train(moving, train_set)
        self.assertTrue(update.called)
        self.assertEqual(record.train_loss, frozen.train_loss)
        _, unfrozen = train(moving, train_set)
        self.assertNotEqual(record.train_loss, unfrozen.train_loss)

    def test_role_estimates_move(self):
        train_set, _ = synthetic()
        trainer = Trainer(make_config(loss={'kind': 'ROLE'}), train_set)
        before = trainer.role.estimates.copy()
        trainer.fit()
        labels = train_set.label_matrix
        self.assertFalse(np.allclose(trainer.role.estimates, before))
        assert_allclose(trainer.role.estimates[labels == 1], 1.0)
        free = trainer.role.estimates[labels == -1]
        self.assertTrue(np.all((free >= 1e-4) & (free <= 1 - 1e-4)))

    def test_permanent_flips(self):
        train_set, _ = synthetic()
        trainer = Trainer(make_config(loss={'kind': 'LLCp', 'delta_rel': 10.0}), train_set)
        trainer.run_epoch()
        self.assertEqual(len(trainer.flips), 0)
        trainer.run_epoch()
        flipped = len(trainer.flips)
        self.assertGreater(flipped, 0)
        trainer.run_epoch()
        self.assertGreaterEqual(len(trainer.flips), flipped)
        labels = train_set.label_matrix
        for example, c in trainer.flips.flips:
            self.assertEqual(labels[example, c], -1)

    def test_model_selection(self):
        train_set, val_set = synthetic()
        _, record = train(make_config(train={'epochs': 6, 'eval_every': 2}), train_set, val_set)
        self.assertEqual([v is None for v in record.val_map], [True, False] * 3)
        values = [v for v in record.val_map if v is not None]
        self.assertEqual(record.best_val_map, max(values))
        self.assertEqual(record.best_epoch, 2 * (values.index(max(values)) + 1))

    def test_no_validation_keeps_final(self):
        train_set, _ = synthetic()
        trainer = Trainer(make_config(), train_set)
        params, record = trainer.fit()
        self.assertIs(params, trainer.params)
        self.assertEqual(record.best_epoch, 5)
        self.assertEqual(record.score, float('-inf'))

    def test_metrics_log(self):
        train_set, val_set = synthetic()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'metrics.csv')
            train(make_config(train={'epochs': 3, 'metrics_log': path}), train_set, val_set)
            with open(path) as f:
                rows = list(csv.reader(f))
        self.assertEqual(rows[0], ['epoch', 'train_loss', 'val_map'])
        self.assertEqual([row[0] for row in rows[1:]], ['1', '2', '3'])


class CheckpointTestCase(TestCase):
    def test_round_trip(self):
        train_set, val_set = synthetic()
        config = make_config(model={'hidden': [3]}, loss={'kind': 'ROLE'}, reg={'kind': 'rp'})
        trainer = Trainer(config, train_set, val_set)
        best, record = trainer.fit()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'checkpoint.json')
            save_checkpoint(path, trainer)
            checkpoint = load_checkpoint(path)
        self.assertEqual(checkpoint.epoch, 5)
        self.assertEqual(checkpoint.best_epoch, record.best_epoch)
        assert_allclose(checkpoint.params.layers[0][0], best.layers[0][0], rtol=0)
        assert_allclose(checkpoint.final.layers[1][1], trainer.params.layers[1][1], rtol=0)
        self.assertEqual(checkpoint.optimizer.t, trainer.optimizer.t)
        self.assertIsInstance(checkpoint.role, RoleState)
        assert_allclose(checkpoint.role.estimates, trainer.role.estimates, rtol=0)
        np.testing.assert_array_equal(checkpoint.role.labels, trainer.role.labels)
        assert_allclose(checkpoint.pseudo_targets.y_bar, trainer.pseudo.y_bar, rtol=0)


class SweepTestCase(TestCase):
    def test_lr_grid(self):
        configs = lr_sweep(make_config(), (1e-2, 1e-3))
        self.assertEqual([c['train']['base_lr'] for c in configs], [1e-2, 1e-3])

    def test_ties_go_first(self):
        train_set, val_set = synthetic()
        configs = [make_config(), make_config()]
        result = sweep(configs, train_set, val_set)
        self.assertEqual(result.scores[0], result.scores[1])
        self.assertEqual(result.best_index, 0)

    def test_picks_best(self):
        dataset = separable_dataset()
        configs = lr_sweep(make_config(train={'epochs': 3}), (1e-7, 1e-1))
        result = sweep(configs, dataset, dataset)
        self.assertEqual(result.best_index, int(np.argmax(result.scores)))
        self.assertEqual(result.best_config, configs[result.best_index])

    def test_planted_config_wins(self):
        wins = 0
        for seed in range(5):
            train_set = signal_dataset(seed)
            val_set = signal_dataset(seed + 100)
            order = np.random.default_rng(seed).permutation(len(train_set))
            shuffled = train_set.with_labels(train_set.label_matrix[order])
            planted = seed % 4
            train_sets = [train_set if i == planted else shuffled for i in range(4)]
            configs = [make_config(train={'epochs': 10, 'seed': seed}) for _ in range(4)]
            wins += sweep(configs, train_sets, val_set).best_index == planted
        self.assertGreaterEqual(wins, 4)

    def test_one_training_set_per_config(self):
        with self.assertRaises(ConfigValidationError):
            sweep([make_config()] * 2, [separable_dataset()], separable_dataset())

    def test_needs_validation(self):
        with self.assertRaises(ConfigValidationError):
            sweep([make_config()], separable_dataset(), None)
        with self.assertRaises(ConfigValidationError):
            sweep([], separable_dataset(), separable_dataset())


class RunExperimentTestCase(TestCase):
    def test_outputs(self):
        train_set, full = synthetic()
        with tempfile.TemporaryDirectory() as tmp:
            paths = {}
            for name, dataset in (('train', train_set), ('val', full), ('test', full)):
                paths[name] = os.path.join(tmp, f'{name}.json')
                save_manifest(paths[name], dataset)
            out = os.path.join(tmp, 'run')
            record = run_experiment(make_config(data=paths, train={'epochs': 2}), out)
            names = sorted(os.listdir(out))
            with open(os.path.join(out, 'record.json')) as f:
                doc = json.load(f)
        self.assertEqual(
            names,
            ['checkpoint.json', 'config.json', 'eval_report.json', 'metrics.csv', 'pr_curves.csv', 'record.json'],
        )
        self.assertEqual(doc['regime'], 'TargetOnly')
        self.assertEqual(doc['loss_kind'], 'AN')
        self.assertEqual(doc['test_map'], record.test['map'])
        self.assertEqual(len(doc['train_loss']), 2)

    def test_requires_data(self):
        with self.assertRaises(ConfigValidationError):
            run_experiment(make_config(), tempfile.gettempdir())


class PresetTestCase(TestCase):
    def test_values(self):
        self.assertEqual(preset_values('l48-targetonly', 'WAN')['loss']['gamma'], 1 / 99)
        self.assertEqual(preset_values('coco-targetonly', 'EM')['loss']['alpha_em'], 0.1)
        self.assertEqual(preset_values('coco-targetonly', 'LLR')['loss']['delta_rel'], 0.4)
        self.assertEqual(preset_values('l48-reg', 'ROLE')['reg'], {'kind': 'rp', 'alpha': 0.1, 'eps_ema': 1e-4})

    def test_unknown(self):
        with self.assertRaises(ConfigValidationError):
            preset_values('imagenet', 'AN')

    def test_explicit_keys_win(self):
        config = apply_preset({'loss': {'kind': 'WAN', 'preset': 'l48-targetonly', 'gamma': 0.5}})
        self.assertEqual(config['loss']['gamma'], 0.5)
        self.assertEqual(config['train']['base_lr'], 1e-4)

    def test_every_entry_resolves(self):
        for name, table in PRESETS.items():
            for kind in table:
                config = TrainConfig.from_config({'loss': {'kind': kind, 'preset': name}})
                self.assertEqual(config.spec.kind.value, kind)

    def test_large_loss_output_layer(self):
        config = TrainConfig.from_config({'loss': {'kind': 'LLCt', 'preset': 'l48-geo'}})
        self.assertEqual(config.model['last_layer_lr_mult'], 10.0)
        self.assertEqual(config.spec.delta_rel, 0.1)
