import json
import os
import shutil
import tempfile
import unittest

from pydantic import ValidationError

from fairshap.config import ExperimentConfig
from fairshap.exceptions import DataFileError
from fairshap.interventions import TrainConfig
from fairshap.model import InputMode
from fairshap.shapley import EstimatorMode
from fairshap.tests.fixtures import clean_environment


class TestDefaults(unittest.TestCase):
    def test_values(self):
        with clean_environment():
            config = ExperimentConfig()
        self.assertEqual(config.dataset, 'adult')
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.permutations, 256)
        self.assertEqual(config.background, 128)
        self.assertEqual(config.stages, ('prepare', 'train', 'explain', 'evaluate', 'plot'))

    def test_dataset_dependent(self):
        with clean_environment():
            adult = ExperimentConfig()
            compas = ExperimentConfig(dataset='compas')
            wide = ExperimentConfig(dataset='compas', hidden=(64, 64))
        self.assertEqual((adult.resolved_hidden, adult.resolved_batch_size), ((50,), 512))
        self.assertEqual((compas.resolved_hidden, compas.resolved_batch_size), ((32,), 128))
        self.assertEqual(wide.resolved_hidden, (64, 64))

    def test_invalid(self):
        with clean_environment():
            for values in ({'permutations': 0}, {'repair': 1.5}, {'thresholds': (0.01, 0.1)}, {'dataset': 'mnist'},
                           {'hidden': (0,)}, {'colour': 'red'},
                           {'stability_seeds': ()}, {'stability_hidden': ((50,), (0,))}):
                with self.assertRaises(ValidationError):
                    ExperimentConfig(**values)


class TestLayers(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.path = os.path.join(self.tmpdir, "config.json")
        with open(self.path, "w") as handle:
            json.dump({'dataset': 'compas', 'seed': 3, 'iterations': 50}, handle)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_file(self):
        with clean_environment():
            config = ExperimentConfig.from_file(self.path)
        self.assertEqual((config.dataset, config.seed, config.iterations), ('compas', 3, 50))

    def test_environment_beats_file(self):
        with clean_environment(FAIRSHAP_SEED="7", FAIRSHAP_HIDDEN="[16, 8]"):
            config = ExperimentConfig.from_file(self.path)
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.hidden, (16, 8))
        self.assertEqual(config.iterations, 50)

    def test_overrides_beat_environment(self):
        with clean_environment(FAIRSHAP_SEED="7"):
            config = ExperimentConfig.from_file(self.path, seed=11, method=None)
        self.assertEqual(config.seed, 11)
        self.assertEqual(config.method, 'baseline')

    def test_nested_file(self):
        with open(self.path, "w") as handle:
            json.dump({'training': {'iterations': 5}}, handle)
        with self.assertRaises(DataFileError):
            ExperimentConfig.from_file(self.path)

    def test_missing_file(self):
        with self.assertRaises(DataFileError):
            ExperimentConfig.from_file(os.path.join(self.tmpdir, "missing.json"))


class TestSerialization(unittest.TestCase):
    def test_json_round_trip(self):
        with clean_environment():
            config = ExperimentConfig(dataset='synthetic', hidden=(8,), resolving=('level',))
            self.assertEqual(ExperimentConfig.model_validate_json(config.model_dump_json()), config)

    def test_hash(self):
        with clean_environment():
            first, second = ExperimentConfig(), ExperimentConfig()
            changed = first.with_overrides(seed=1)
        self.assertEqual(first.config_hash(), second.config_hash())
        self.assertNotEqual(first.config_hash(), changed.config_hash())
        self.assertEqual(len(first.config_hash()), 64)
        keys = list(json.loads(first.canonical_json()))
        self.assertEqual(keys, sorted(keys))


class TestDerivedSettings(unittest.TestCase):
    def setUp(self):
        with clean_environment():
            self.config = ExperimentConfig(dataset='synthetic', iterations=40, notion='eo', aux_protected=False)

    def test_train_config(self):
        cfg = self.config.train_config()
        self.assertIsInstance(cfg, TrainConfig)
        self.assertEqual((cfg.iterations, cfg.batch_size, cfg.notion), (40, 64, 'eo'))

    def test_estimator_config(self):
        cfg = self.config.estimator_config()
        self.assertIs(cfg.mode, EstimatorMode.SAMPLED)
        self.assertEqual((cfg.permutations, cfg.background_size, cfg.max_rows), (256, 128, 1000))

    def test_input_mode(self):
        self.assertEqual(self.config.input_mode(), InputMode(True, True, False))

    def test_stability_grid(self):
        self.assertEqual(self.config.stability_grid(), {
            'hidden': [(50,), (50, 50)],
            'learning_rate': [1e-3, 3e-3],
            'adversary_steps': [1, 2],
        })
        self.assertEqual(self.config.stability_seeds, (0, 1, 2))
        self.assertIsNone(self.config.processes)

    def test_training_seed(self):
        with clean_environment():
            config = ExperimentConfig(seed=3, weight_seed=7)
        self.assertEqual(config.train_config().seed, 7)
        self.assertEqual(config.estimator_config().seed, 3)
