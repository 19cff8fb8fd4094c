import os
import shutil
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from fairshap.exceptions import DimensionMismatchError, InvalidProbabilityError, MissingSideInfoError, \
    NonFiniteError, UnresolvedReferenceError
from fairshap.model import Adam, AdversarialLoss, Batch, CallablePredictor, CrossEntropyLoss, DifferencePredictor, \
    InputMode, Mlp, PerturbedModel, SquaredErrorLoss, SuppressionLoss, backward, compose_perturbed, constant_predictor, \
    forward, head, load_model, pinned_log, pinned_softmax, save_model, sigmoid
from fairshap.tests.fixtures import toy_dataset


def numeric_gradients(model, batch, loss_spec, eps=1e-6):
    grads = []
    for param in model.parameters():
        grad = np.zeros_like(param)
        for index in np.ndindex(*param.shape):
            saved = param[index]
            param[index] = saved + eps
            upper = backward(model, batch, loss_spec)[0]
            param[index] = saved - eps
            lower = backward(model, batch, loss_spec)[0]
            param[index] = saved
            grad[index] = (upper - lower) / (2 * eps)
        grads.append(grad)
    return grads


class TestGradients(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(7)
        self.X = rng.standard_normal((12, 4))
        self.y = rng.integers(0, 2, 12)
        self.a = rng.integers(0, 2, 12)

    def assertGradientsMatch(self, model, batch, loss_spec):
        _, analytic = backward(model, batch, loss_spec)
        numeric = numeric_gradients(model, batch, loss_spec)
        self.assertEqual(len(analytic), len(numeric))
        for got, expected in zip(analytic, numeric):
            npt.assert_allclose(got, expected, rtol=1e-4, atol=1e-7)

    def test_cross_entropy_binary(self):
        model = Mlp(4, (5,), 2, seed=1)
        self.assertGradientsMatch(model, Batch(self.X, self.y, self.a), CrossEntropyLoss())

    def test_cross_entropy_multiclass(self):
        model = Mlp(4, (5, 3), 3, seed=2)
        y = np.arange(12) % 3
        self.assertGradientsMatch(model, Batch(self.X, y, self.a), CrossEntropyLoss())

    def test_squared_error(self):
        model = Mlp(4, (3,), 2, seed=3)
        self.assertGradientsMatch(model, Batch(self.X, self.y.astype(float), self.a), SquaredErrorLoss())

    def test_squared_error_needs_one_unit(self):
        model = Mlp(4, (3,), 3, seed=3)
        with self.assertRaises(DimensionMismatchError):
            backward(model, Batch(self.X, self.y, self.a), SquaredErrorLoss())

    def test_adversarial_dp(self):
        model = Mlp(4, (5,), 2, seed=4)
        adversary = Mlp(1, (3,), 2, seed=5)
        self.assertGradientsMatch(model, Batch(self.X, self.y, self.a), AdversarialLoss(adversary, 0.7, 'dp'))

    def test_adversarial_eo(self):
        model = Mlp(4, (5,), 2, seed=4)
        adversary = Mlp(2, (3,), 2, seed=6)
        self.assertGradientsMatch(model, Batch(self.X, self.y, self.a), AdversarialLoss(adversary, 1.3, 'eo'))

    def test_adversarial_needs_protected(self):
        model = Mlp(4, (5,), 2, seed=4)
        with self.assertRaises(MissingSideInfoError):
            backward(model, Batch(self.X, self.y), AdversarialLoss(Mlp(1, (3,), 2), 1.0))

    def test_projection_without_weight_keeps_orthogonal_part(self):
        model = Mlp(4, (5,), 2, seed=4)
        adversary = Mlp(1, (3,), 2, seed=5)
        batch = Batch(self.X, self.y, self.a)
        _, ce = backward(model, batch, CrossEntropyLoss())
        _, adv = backward(model, batch, AdversarialLoss(adversary, 1.0, 'dp'))
        _, projected = backward(model, batch, AdversarialLoss(adversary, 0.0, 'dp', projection=True))
        flat = lambda grads: np.concatenate([np.ravel(g) for g in grads])
        h = flat(ce) - flat(adv)
        npt.assert_allclose(flat(projected) @ h, 0.0, atol=1e-10)

    def test_perturbed_cross_entropy(self):
        base = Mlp(4, (3,), 2, seed=8)
        model = PerturbedModel(base, hidden=(4,), seed=9)
        model.aux.weights[-1][...] = np.random.default_rng(1).standard_normal(model.aux.weights[-1].shape)
        self.assertGradientsMatch(model, Batch(self.X, self.y, self.a), CrossEntropyLoss())

    def test_suppression(self):
        ds = toy_dataset()
        model = Mlp(ds.n_features, (4,), 2, seed=10)
        self.assertGradientsMatch(model, Batch(ds.X, ds.y, ds.a), SuppressionLoss(ds.intervene, 2.0))


class TestHeads(unittest.TestCase):
    def test_pinned_round_trip(self):
        s = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
        npt.assert_allclose(pinned_softmax(pinned_log(s)[:, 1:]), s)
        npt.assert_allclose(pinned_log(s)[:, 0], 0.0)

    def test_round_trip_over_random_simplices(self):
        rng = np.random.default_rng(11)
        for k in (2, 3, 5):
            s = rng.dirichlet(np.ones(k), size=1000)
            error = np.max(np.abs(pinned_softmax(pinned_log(s)[:, 1:]) - s))
            self.assertLessEqual(float(error), 1e-12)

    def test_sigmoid_head_over_random_simplices(self):
        s = np.random.default_rng(12).dirichlet(np.ones(2), size=1000)
        free = pinned_log(s)[:, 1:]
        self.assertLessEqual(float(np.max(np.abs(head(free) - pinned_softmax(free)))), 1e-12)
        self.assertLessEqual(float(np.max(np.abs(head(free) - s))), 1e-12)

    def test_binary_head_is_pinned_softmax(self):
        z = np.linspace(-5, 5, 11)[:, None]
        npt.assert_allclose(head(z), pinned_softmax(z), atol=1e-14)
        npt.assert_allclose(head(z)[:, 1], 1.0 / (1.0 + np.exp(-z[:, 0])))

    def test_sigmoid_saturates(self):
        self.assertEqual(sigmoid(-1000.0), 0.0)
        self.assertEqual(sigmoid(1000.0), 1.0)

    def test_pinned_log_rejects_zero(self):
        with self.assertRaises(InvalidProbabilityError):
            pinned_log(np.array([0.0, 1.0]))


class TestMlp(unittest.TestCase):
    def test_seeded_initialisation(self):
        first, second = Mlp(3, (4,), 2, seed=5), Mlp(3, (4,), 2, seed=5)
        for p, q in zip(first.parameters(), second.parameters()):
            npt.assert_array_equal(p, q)
        self.assertEqual(first.widths, (3, 4, 1))

    def test_no_hidden_layer_is_logistic_regression(self):
        model = Mlp(3, (), 2, seed=1)
        X = np.eye(3)
        expected = 1.0 / (1.0 + np.exp(-(X @ model.weights[0][:, 0] + model.biases[0][0])))
        npt.assert_allclose(model.predict_proba(X)[:, 1], expected)

    def test_forward_single_row(self):
        model = Mlp(3, (4,), 3, seed=1)
        x = np.array([0.5, -1.0, 2.0])
        proba = forward(model, x)
        self.assertEqual(proba.shape, (3,))
        self.assertAlmostEqual(float(proba.sum()), 1.0)

    def test_wrong_width(self):
        with self.assertRaises(DimensionMismatchError):
            Mlp(3, (4,), 2).predict_proba(np.zeros((2, 5)))

    def test_non_finite_input(self):
        with self.assertRaises(NonFiniteError):
            Mlp(2, (2,), 2).predict_proba(np.array([[np.nan, 1.0]]))

    def test_copy_is_independent(self):
        model = Mlp(3, (4,), 2, seed=1)
        clone = model.copy()
        clone.weights[0][0, 0] += 1.0
        self.assertNotEqual(clone.weights[0][0, 0], model.weights[0][0, 0])


class TestPerturbedModel(unittest.TestCase):
    def setUp(self):
        self.base = Mlp(3, (4,), 2, seed=2)
        self.X = np.random.default_rng(0).standard_normal((6, 3))
        self.a = np.array([0, 1, 0, 1, 1, 0])

    def test_starts_at_base(self):
        model = PerturbedModel(self.base, seed=3)
        npt.assert_array_equal(model.predict_proba(self.X, self.a), self.base.predict_proba(self.X))
        npt.assert_array_equal(model.perturbation(self.X, self.a), 0.0)

    def test_aux_width(self):
        self.assertEqual(PerturbedModel(self.base).aux_width, 5)
        self.assertEqual(PerturbedModel(self.base, input_mode=InputMode(True, False, False)).aux_width, 1)
        with self.assertRaises(ValueError):
            PerturbedModel(self.base, input_mode=InputMode(False, False, False))

    def test_logit_shift(self):
        model = PerturbedModel(self.base, input_mode=InputMode(True, False, True), hidden=(), seed=3)
        model.aux.weights[0][...] = [[0.0], [2.0]]
        model.aux.biases[0][...] = [0.5]
        base_logit = np.log(self.base.predict_proba(self.X)[:, 1]) - np.log(self.base.predict_proba(self.X)[:, 0])
        expected = 1.0 / (1.0 + np.exp(-(base_logit + 0.5 + 2.0 * self.a)))
        npt.assert_allclose(model.predict_proba(self.X, self.a)[:, 1], expected, rtol=1e-10)

    def test_compose_single_row(self):
        model = PerturbedModel(self.base, seed=3)
        model.aux.weights[-1][...] = 0.3
        row = compose_perturbed(model, self.X[2], self.a[2])
        npt.assert_allclose(row, model.predict_proba(self.X, self.a)[2])

    def test_base_is_frozen(self):
        model = PerturbedModel(self.base, seed=3)
        self.assertEqual(len(model.parameters()), len(model.aux.parameters()))
        for p, q in zip(model.parameters(), model.aux.parameters()):
            self.assertIs(p, q)

    def test_needs_protected(self):
        with self.assertRaises(MissingSideInfoError):
            PerturbedModel(self.base).predict_proba(self.X)

    def test_saturated_base_stays_finite(self):
        base = constant_predictor([0.0, 1.0], n_inputs=3)
        model = PerturbedModel(base, input_mode=InputMode(True, True, False), hidden=(2,))
        npt.assert_array_equal(model.predict_proba(self.X), base.predict_proba(self.X))
        model.aux.weights[-1][...] = 0.5
        self.assertTrue(np.all(np.isfinite(model.predict_proba(self.X))))

    def test_zero_perturbation_is_exactly_base(self):
        base = CallablePredictor(lambda X, a: 1.0 - 1e-12 * (X[:, 0] > 0), n_inputs=3)
        model = PerturbedModel(base, input_mode=InputMode(True, True, False), hidden=(2,))
        npt.assert_array_equal(model.predict_proba(self.X), base.predict_proba(self.X))
        npt.assert_array_equal(compose_perturbed(model, self.X[1], None), base.predict_proba(self.X[1:2])[0])


class TestCombinations(unittest.TestCase):
    def test_difference(self):
        p = constant_predictor([0.3, 0.7])
        q = constant_predictor([0.6, 0.4])
        diff = DifferencePredictor(p, q)
        self.assertFalse(diff.probabilistic)
        npt.assert_allclose(diff.predict_proba(np.zeros((2, 1))), [[-0.3, 0.3], [-0.3, 0.3]])

    def test_score_vector(self):
        predictor = CallablePredictor(lambda X, a: X[:, 0], n_inputs=2)
        npt.assert_allclose(predictor.predict_proba(np.array([[0.25, 0.0]])), [[0.75, 0.25]])


class TestAdam(unittest.TestCase):
    def test_first_step(self):
        param = np.array([1.0, -1.0])
        optimizer = Adam([param], learning_rate=0.1)
        optimizer.step([param], [np.array([2.0, -0.5])])
        npt.assert_allclose(param, [0.9, -0.9], rtol=1e-6)


class TestModelFiles(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.X = np.random.default_rng(0).standard_normal((5, 3))
        self.a = np.array([0, 1, 1, 0, 1])

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_mlp_round_trip(self):
        model = Mlp(3, (4, 2), 3, seed=4, name="net")
        path = os.path.join(self.tmpdir, "net.json")
        save_model(model, path)
        loaded = load_model(path)
        self.assertEqual(loaded.name, "net")
        npt.assert_array_equal(loaded.predict_proba(self.X), model.predict_proba(self.X))

    def test_perturbed_references_base(self):
        base = Mlp(3, (4,), 2, seed=4)
        model = PerturbedModel(base, seed=5)
        model.aux.weights[-1][...] = 0.2
        base_path = os.path.join(self.tmpdir, "baseline.json")
        path = os.path.join(self.tmpdir, "perturbed.json")
        save_model(base, base_path)
        save_model(model, path, base_path)
        loaded = load_model(path)
        npt.assert_array_equal(loaded.predict_proba(self.X, self.a), model.predict_proba(self.X, self.a))
        os.remove(base_path)
        with self.assertRaises(UnresolvedReferenceError):
            load_model(path)

    def test_unsaveable_predictor(self):
        with self.assertRaises(ValueError):
            save_model(constant_predictor([0.5, 0.5]), os.path.join(self.tmpdir, "constant.json"))
