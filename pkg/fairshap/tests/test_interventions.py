import os
import shutil
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from fairshap import fairness_metrics
from fairshap.dataset import Split, load_adult, make_synthetic
from fairshap.exceptions import DegenerateDistributionError, MissingSideInfoError, TrainConfigError, \
    UnknownPlayerError
from fairshap.interventions import Fresh, HullPoint, Perturbation, TrainConfig, feldman_postprocess, \
    hardt_postprocess, lambda_sweep, parameters_equal, repair_sweep, roc_points, stability_grid, \
    suppression_retrain, train_adversarial, train_baseline, upper_hull
from fairshap.model import Batch, CallablePredictor, CrossEntropyLoss, backward, constant_predictor, load_model, \
    save_model, sigmoid
from fairshap.shapley import CoalitionEstimatorConfig, EstimatorMode, global_shapley, value_function_spec
from fairshap.tests.fixtures import DATA_DIR, ks_statistic, requires_data, separable_dataset, slow

QUICK = TrainConfig(iterations=60, batch_size=64, learning_rate=1e-2, eval_every=10, seed=0)


def scorer(ds):
    """Fixed scores from the signal and the group columns of the synthetic data"""
    signal = ds.column_names.index('signal')
    group = ds.column_names.index('group=g1')
    return CallablePredictor(lambda X, a: sigmoid(X[:, signal] + 0.8 * X[:, group]), n_inputs=ds.n_features)


class TestTrainConfig(unittest.TestCase):
    def test_validate(self):
        self.assertEqual(TrainConfig().validate(), TrainConfig())
        with self.assertRaises(TrainConfigError):
            TrainConfig(iterations=0).validate()
        with self.assertRaises(TrainConfigError):
            TrainConfig(notion='cdp').validate()
        with self.assertRaises(TrainConfigError):
            TrainConfig(adversary_weight=-1.0).validate()


class TestBaseline(unittest.TestCase):
    def test_learns_separable_data(self):
        ds = separable_dataset()
        model, train_log = train_baseline(ds, (8,), QUICK._replace(iterations=400))
        self.assertGreater(fairness_metrics.hard_accuracy(model, ds).value, 0.9)
        self.assertEqual(train_log.method, "baseline")

    def test_checkpoint_restores_best_validation_loss(self):
        ds = make_synthetic(300)
        model, train_log = train_baseline(ds, (8,), QUICK)
        second_half = [entry for entry in train_log.entries if entry.iteration > QUICK.iterations // 2]
        best = min(second_half, key=lambda entry: entry.validation_loss)
        self.assertEqual(train_log.restored_iteration, best.iteration)
        validation = ds.view(Split.VALIDATION)
        loss, _ = backward(model, Batch(validation.X, validation.y, validation.a), CrossEntropyLoss())
        self.assertAlmostEqual(loss, best.validation_loss, places=10)

    def test_without_checkpoint(self):
        ds = make_synthetic(300)
        _, train_log = train_baseline(ds, (8,), QUICK._replace(checkpoint=False))
        self.assertIsNone(train_log.restored_iteration)
        self.assertEqual([entry.iteration for entry in train_log.entries], list(range(10, 61, 10)))

    def test_seeded(self):
        ds = make_synthetic(300)
        first, _ = train_baseline(ds, (8,), QUICK)
        second, _ = train_baseline(ds, (8,), QUICK)
        self.assertTrue(parameters_equal(first, second))


class TestAdversarial(unittest.TestCase):
    def setUp(self):
        self.ds = make_synthetic(300)

    def test_zero_weight_is_baseline(self):
        baseline, _ = train_baseline(self.ds, (8,), QUICK)
        fresh, _ = train_adversarial(self.ds, Fresh((8,)), QUICK._replace(adversary_weight=0.0))
        self.assertTrue(parameters_equal(fresh, baseline))

    def test_perturbation_leaves_base_frozen(self):
        base, _ = train_baseline(self.ds, (8,), QUICK)
        snapshot = base.copy()
        model, train_log = train_adversarial(self.ds, Perturbation(base), QUICK._replace(adversary_weight=2.0))
        self.assertIs(model.base, base)
        self.assertTrue(parameters_equal(base, snapshot))
        self.assertEqual(train_log.method, "adv-perturbed")
        self.assertFalse(np.all(model.perturbation(self.ds.X, self.ds.a) == 0.0))

    def test_eo_and_projection_run(self):
        cfg = QUICK._replace(notion='eo', adversary_weight=1.0, projection=True, adversary_steps=2)
        model, train_log = train_adversarial(self.ds, Fresh((8,)), cfg)
        self.assertEqual(train_log.method, "adv-fresh")
        self.assertTrue(all(np.isfinite(entry.validation_fairness) for entry in train_log.entries))

    def test_unknown_target(self):
        with self.assertRaises(ValueError):
            train_adversarial(self.ds, (8,), QUICK)

    @slow
    def test_reduces_demographic_parity(self):
        ds = make_synthetic(1000)
        base, _ = train_baseline(ds, (16,), QUICK._replace(iterations=600))
        model, _ = train_adversarial(ds, Perturbation(base), QUICK._replace(iterations=600, adversary_weight=5.0))
        self.assertLess(fairness_metrics.dp_difference(model, ds).value, fairness_metrics.dp_difference(base, ds).value)


class TestSuppression(unittest.TestCase):
    def test_shrinks_intervention_gap(self):
        ds = make_synthetic(300)
        base, _ = train_baseline(ds, (8,), QUICK._replace(iterations=200))
        model, train_log = suppression_retrain(base, ds, alpha=10.0, batches=200, cfg=QUICK._replace(learning_rate=5e-3))
        self.assertLess(fairness_metrics.intervention_gap(model, ds).value, fairness_metrics.intervention_gap(base, ds).value)
        self.assertIsNone(train_log.restored_iteration)
        self.assertEqual(train_log.entries[-1].iteration, 200)

    def test_removes_group_attribution(self):
        ds = make_synthetic(2000)
        cfg = QUICK._replace(iterations=2000, learning_rate=1e-3, eval_every=50)
        base, _ = train_baseline(ds, (16,), cfg)
        model, _ = suppression_retrain(base, ds, alpha=3.0, batches=200, cfg=cfg)
        spec = value_function_spec('dp', ds, Split.TEST)
        exact = CoalitionEstimatorConfig(EstimatorMode.EXACT, background_size=64, max_rows=200)
        before = global_shapley(spec, base, ds, Split.TEST, exact)
        after = global_shapley(spec, model, ds, Split.TEST, exact)
        group = before.players.index('group')
        self.assertGreater(abs(before.phi[group]), 0.05)
        self.assertLess(abs(after.phi[group]), 0.01)
        self.assertLess(fairness_metrics.intervention_gap(model, ds).value, 0.02)

    def test_needs_protected_in_inputs(self):
        ds = make_synthetic(300, include_protected=False)
        base, _ = train_baseline(ds, (4,), QUICK._replace(iterations=10))
        with self.assertRaises(UnknownPlayerError):
            suppression_retrain(base, ds, 1.0, 10, QUICK)


class TestFeldman(unittest.TestCase):
    def setUp(self):
        self.ds = make_synthetic(600)
        self.base = scorer(self.ds)

    def test_no_repair_keeps_scores(self):
        repaired = feldman_postprocess(self.base, self.ds, 0.0)
        X, _, a, _ = self.ds.view(Split.TEST)
        npt.assert_array_equal(repaired.predict_proba(X, a), self.base.predict_proba(X, a))

    def test_full_repair_matches_distributions(self):
        repaired = feldman_postprocess(self.base, self.ds, 1.0)
        X, _, a, _ = self.ds.view(Split.TRAIN)
        scores = repaired.predict_proba(X, a)[:, 1]
        self.assertLess(ks_statistic(scores[a == 0], scores[a == 1]), 0.05)
        self.assertLess(fairness_metrics.dp_difference(repaired, self.ds, Split.TRAIN).value, 0.02)
        self.assertGreater(fairness_metrics.dp_difference(self.base, self.ds, Split.TRAIN).value, 0.1)

    def test_order_within_group(self):
        repaired = feldman_postprocess(self.base, self.ds, 0.6)
        X, _, a, _ = self.ds.view(Split.TEST)
        original = self.base.predict_proba(X, a)[:, 1]
        scores = repaired.predict_proba(X, a)[:, 1]
        for group in (0, 1):
            order = np.argsort(original[a == group])
            self.assertTrue(np.all(np.diff(scores[a == group][order]) >= 0.0))

    def test_needs_protected(self):
        repaired = feldman_postprocess(self.base, self.ds, 1.0)
        with self.assertRaises(MissingSideInfoError):
            repaired.predict_proba(self.ds.X)

    def test_constant_scores(self):
        with self.assertRaises(DegenerateDistributionError):
            feldman_postprocess(constant_predictor([0.4, 0.6], n_inputs=self.ds.n_features), self.ds, 1.0)

    def test_sweep(self):
        runs = repair_sweep(self.base, self.ds, levels=(0.0, 0.5, 1.0))
        self.assertEqual([run.weight for run in runs], [0.0, 0.5, 1.0])
        self.assertEqual({run.method for run in runs}, {"feldman"})


class TestHardt(unittest.TestCase):
    def setUp(self):
        self.ds = make_synthetic(600)
        self.base = scorer(self.ds)

    def test_roc_points(self):
        points = roc_points([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
        self.assertEqual([(p.fpr, p.tpr) for p in points], [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)])
        self.assertEqual(points[0].threshold, 2.0)

    def test_upper_hull(self):
        points = [HullPoint(0.0, 0.0, 2.0), HullPoint(0.5, 0.4, 0.5), HullPoint(0.2, 0.6, 0.7), HullPoint(1.0, 1.0, 0.0)]
        self.assertEqual([(p.fpr, p.tpr) for p in upper_hull(points)], [(0.0, 0.0), (0.2, 0.6), (1.0, 1.0)])

    def test_equalized_rates_on_fitted_split(self):
        rule = hardt_postprocess(self.base, self.ds, Split.VALIDATION)
        X, y, a, _ = self.ds.view(Split.VALIDATION)
        rate = rule.positive_rate(self.base.predict_proba(X, a)[:, 1], a)
        tpr = [rate[(a == group) & (y == 1)].mean() for group in (0, 1)]
        fpr = [rate[(a == group) & (y == 0)].mean() for group in (0, 1)]
        self.assertAlmostEqual(tpr[0], tpr[1], places=9)
        self.assertAlmostEqual(fpr[0], rule.fpr, places=9)
        self.assertAlmostEqual(fpr[1], rule.fpr, places=9)
        self.assertAlmostEqual(tpr[0], rule.tpr, places=9)

    def test_seeded_predictions(self):
        rule = hardt_postprocess(self.base, self.ds, seed=4)
        X, _, a, _ = self.ds.view(Split.TEST)
        npt.assert_array_equal(rule.predict(X, a), rule.predict(X, a))

    def test_constant_scores(self):
        with self.assertRaises(DegenerateDistributionError):
            hardt_postprocess(constant_predictor([0.4, 0.6], n_inputs=self.ds.n_features), self.ds)


class TestPostProcessorFiles(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.ds = make_synthetic(300)
        self.base, _ = train_baseline(self.ds, (4,), QUICK._replace(iterations=20))
        self.base_path = os.path.join(self.tmpdir, "baseline.json")
        save_model(self.base, self.base_path)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_round_trip(self):
        X, _, a, _ = self.ds.view(Split.TEST)
        for name, model in (("feldman", feldman_postprocess(self.base, self.ds, 0.7)),
                            ("hardt", hardt_postprocess(self.base, self.ds, seed=2))):
            path = os.path.join(self.tmpdir, name + ".json")
            save_model(model, path, self.base_path)
            loaded = load_model(path)
            npt.assert_allclose(loaded.predict_proba(X, a), model.predict_proba(X, a))
            npt.assert_array_equal(loaded.predict(X, a), model.predict(X, a))


class TestSweeps(unittest.TestCase):
    def setUp(self):
        self.ds = make_synthetic(300)
        self.cfg = QUICK._replace(iterations=20)

    def test_lambda_sweep(self):
        runs = lambda_sweep(self.ds, Fresh((4,)), self.cfg, weights=(0.0, 1.0))
        self.assertEqual([run.weight for run in runs], [0.0, 1.0])
        for run in runs:
            self.assertEqual(run.method, "adv-fresh")
            self.assertTrue(0.0 <= run.accuracy <= 1.0)
            self.assertTrue(0.0 <= run.fairness <= 1.0)

    def test_stability_grid(self):
        base, _ = train_baseline(self.ds, (4,), self.cfg)
        runs = stability_grid(self.ds, base, {'hidden': [(4,)], 'adversary_steps': [1, 2]}, seeds=[0], cfg=self.cfg)
        self.assertEqual(len(runs), 4)
        self.assertEqual(sorted({run.method for run in runs}), ["adv-fresh", "adv-perturbed"])
        self.assertEqual(sorted(run.settings['adversary_steps'] for run in runs), [1, 1, 2, 2])

    def test_unknown_axis(self):
        with self.assertRaises(TrainConfigError):
            stability_grid(self.ds, None, {'momentum': [0.9]}, seeds=[0], cfg=self.cfg)


@slow
@requires_data('adult.data', 'adult.test')
class TestAdultResults(unittest.TestCase):
    """Desk-scale reproduction on the canonical Adult files"""

    CFG = TrainConfig(iterations=2000, batch_size=512, learning_rate=1e-3, eval_every=50, seed=0)

    @classmethod
    def setUpClass(cls):
        cls.ds = load_adult(os.path.join(DATA_DIR, 'adult.data'), os.path.join(DATA_DIR, 'adult.test'))
        cls.base, _ = train_baseline(cls.ds, (50,), cls.CFG)

    def explain_dp(self, predictor):
        spec = value_function_spec('dp', self.ds, Split.TEST)
        cfg = CoalitionEstimatorConfig(EstimatorMode.SAMPLED, permutations=32, background_size=32, seed=0, max_rows=300)
        report = global_shapley(spec, predictor, self.ds, Split.TEST, cfg)
        return dict(zip(report.players, report.phi)), report.total

    def test_baseline(self):
        self.assertTrue(0.84 <= fairness_metrics.hard_accuracy(self.base, self.ds).value <= 0.86)
        self.assertAlmostEqual(fairness_metrics.dp_difference(self.base, self.ds).value, 0.193, delta=0.03)

    def test_suppression_moves_attribution_to_proxies(self):
        model, _ = suppression_retrain(self.base, self.ds, alpha=3.0, batches=200, cfg=self.CFG)
        self.assertGreater(fairness_metrics.agreement(model, self.base, self.ds), 0.98)
        before, before_total = self.explain_dp(self.base)
        after, after_total = self.explain_dp(model)
        self.assertLess(abs(after['sex']), 0.01)
        self.assertLess(abs(after_total - before_total), 0.05)
        for proxy in ('marital-status', 'relationship'):
            self.assertGreater(abs(after[proxy]), abs(before[proxy]))

    def test_perturbed_frontier(self):
        runs = lambda_sweep(self.ds, Perturbation(self.base), self.CFG)
        self.assertTrue(any(run.fairness <= 0.1 and run.accuracy >= 0.832 for run in runs))
        table = fairness_metrics.threshold_table(runs, notion='dp')
        reached = [value for value in table.rows[0] if value is not None]
        self.assertEqual(reached, sorted(reached, reverse=True))

    def test_hardt_equalized_odds(self):
        rule = hardt_postprocess(self.base, self.ds, Split.VALIDATION)
        self.assertLessEqual(fairness_metrics.eo_difference(rule, self.ds, hard=True).value, 0.1)
        self.assertGreaterEqual(fairness_metrics.hard_accuracy(rule, self.ds).value, 0.813)

    def test_perturbed_runs_are_more_stable(self):
        snapshot = self.base.copy()
        grid = {'hidden': [(50,), (50, 50)], 'learning_rate': [1e-3, 3e-3], 'adversary_steps': [1, 2]}
        runs = stability_grid(self.ds, self.base, grid, seeds=(0, 1, 2), cfg=self.CFG._replace(adversary_weight=1.0))
        self.assertEqual(len(runs), 48)
        variance = {}
        for method in ("adv-fresh", "adv-perturbed"):
            band = fairness_metrics.fairness_bins([run for run in runs if run.method == method], edges=((0.05, 0.1),))[0]
            self.assertGreater(band.count, 1)
            variance[method] = band.variance
        self.assertLess(variance["adv-perturbed"], variance["adv-fresh"])
        self.assertTrue(parameters_equal(self.base, snapshot))
        for run in runs:
            if run.method == "adv-perturbed":
                self.assertTrue(parameters_equal(run.predictor.base, snapshot))
