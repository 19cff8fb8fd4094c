"""Predictors: a feedforward network with hand-derived gradients and the
perturbed composition f_theta = softmax(l(f(x)) + aux(f(x), x, a)).

Every probabilistic predictor returns an (n, k) matrix of class probabilities.
Trainable predictors additionally expose their free logits, the k-1 logits
left after pinning the first class to zero, through `_forward_cache` and take
gradients with respect to them through `_backprop`.
"""
from collections import namedtuple
import json
import logging
import os

import numpy as np

from fairshap.exceptions import DataFileError, DimensionMismatchError, InvalidProbabilityError, \
    MissingSideInfoError, NonFiniteError, UnresolvedReferenceError

log = logging.getLogger("fairshap.model")

LOGIT_CLAMP = 1e-7
MODEL_FORMAT = "fairshap-model"
MODEL_VERSION = 1

Batch = namedtuple("Batch", ['X', 'y', 'a'], defaults=[None])
InputMode = namedtuple("InputMode", ['score', 'features', 'protected'], defaults=[True, True, True])

CrossEntropyLoss = namedtuple("CrossEntropyLoss", [])
SquaredErrorLoss = namedtuple("SquaredErrorLoss", [])
AdversarialLoss = namedtuple("AdversarialLoss", ['adversary', 'weight', 'notion', 'projection'], defaults=['dp', False])
SuppressionLoss = namedtuple("SuppressionLoss", ['intervene', 'alpha'])

MODEL_TYPES = {}


def register_model(type_name):
    """Class decorator making a predictor loadable by `load_model`"""
    def decorator(cls):
        cls.type_name = type_name
        MODEL_TYPES[type_name] = cls
        return cls
    return decorator


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logit(p, clamp=LOGIT_CLAMP):
    p = np.clip(np.asarray(p, dtype=float), clamp, 1.0 - clamp)
    return np.log(p) - np.log1p(-p)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    shifted = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def pinned_log(s):
    """l(s)_i = log s_i - log s_1, a right-inverse of softmax on the open simplex"""
    s = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s <= 0.0):
        raise InvalidProbabilityError("pinned_log needs strictly positive probabilities")
    logs = np.log(s)
    return logs - logs[..., :1]


def pinned_softmax(free):
    """Probabilities from the k-1 free logits, the first logit pinned to zero"""
    free = np.asarray(free, dtype=float)
    full = np.concatenate([np.zeros(free.shape[:-1] + (1,)), free], axis=-1)
    return softmax(full)


def head(free):
    """Output head: sigmoid for a single free logit, pinned softmax otherwise"""
    free = np.asarray(free, dtype=float)
    if free.shape[-1] == 1:
        p = sigmoid(free[..., 0])
        return np.stack([1.0 - p, p], axis=-1)
    return pinned_softmax(free)


def clamp_probabilities(proba, clamp=LOGIT_CLAMP):
    """Keep probabilities inside [clamp, 1 - clamp] so their logits stay finite"""
    proba = np.asarray(proba, dtype=float)
    if proba.shape[-1] == 2:
        p = np.clip(proba[..., 1], clamp, 1.0 - clamp)
        return np.stack([1.0 - p, p], axis=-1)
    clipped = np.clip(proba, clamp, None)
    return clipped / np.sum(clipped, axis=-1, keepdims=True)


def _as_matrix(X, n_inputs):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if n_inputs is not None and X.shape[1] != n_inputs:
        raise DimensionMismatchError("Expected %s input columns, got %s" % (n_inputs, X.shape[1]))
    return X


class Predictor:
    """Classifier interface returning class probabilities"""
    name = "predictor"
    trainable = False
    probabilistic = True

    def __init__(self, n_classes, n_inputs=None, name=None):
        self.n_classes = int(n_classes)
        self.n_inputs = n_inputs
        if name is not None:
            self.name = name

    def __repr__(self):
        return "<%s name=%s k=%s>" % (self.__class__.__name__, self.name, self.n_classes)

    def predict_proba(self, X, a=None):
        raise NotImplementedError()

    def predict(self, X, a=None):
        return np.argmax(self.predict_proba(X, a), axis=1)


@register_model("mlp")
class Mlp(Predictor):
    """ReLU feedforward network, He-uniform initialised from a seed

    The output layer has k-1 units holding the free logits.
    """
    name = "mlp"
    trainable = True

    def __init__(self, n_inputs, hidden=(50,), n_classes=2, seed=0, name=None):
        super().__init__(n_classes, n_inputs, name)
        if self.n_classes < 2:
            raise ValueError("Need at least two classes, got %s" % n_classes)
        self.hidden = tuple(int(width) for width in hidden)
        self.seed = seed
        widths = self.widths
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def widths(self):
        return (self.n_inputs,) + self.hidden + (self.n_classes - 1,)

    def parameters(self):
        params = []
        for weight, bias in zip(self.weights, self.biases):
            params.extend((weight, bias))
        return params

    def set_parameters(self, params):
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise DimensionMismatchError("Expected %s parameter arrays, got %s" % (2 * len(self.weights), len(params)))
        for index, value in enumerate(params):
            target = self.weights[index // 2] if index % 2 == 0 else self.biases[index // 2]
            value = np.asarray(value, dtype=float)
            if value.shape != target.shape:
                raise DimensionMismatchError("Parameter %s has shape %s, expected %s" % (index, value.shape, target.shape))
            target[...] = value

    def copy(self):
        clone = Mlp(self.n_inputs, self.hidden, self.n_classes, self.seed, self.name)
        clone.set_parameters(self.parameters())
        return clone

    def _forward_cache(self, X, a=None):
        X = _as_matrix(X, self.n_inputs)
        activations, preactivations = [X], []
        h = X
        last = len(self.weights) - 1
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            z = h @ weight + bias
            preactivations.append(z)
            h = np.maximum(z, 0.0) if index < last else z
            activations.append(h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("Non-finite logits in %s, parameters have exploded" % self.name)
        return h, (activations, preactivations)

    def _backprop(self, cache, grad_free):
        """Parameter gradients and input gradient for an upstream gradient on the free logits"""
        activations, preactivations = cache
        delta = np.asarray(grad_free, dtype=float)
        grads = [None] * (2 * len(self.weights))
        for index in reversed(range(len(self.weights))):
            grads[2 * index] = activations[index].T @ delta
            grads[2 * index + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[index].T
            if index > 0:
                delta = delta * (preactivations[index - 1] > 0.0)
        return grads, delta

    def logits(self, X, a=None):
        return self._forward_cache(X)[0]

    def predict_proba(self, X, a=None):
        return head(self.logits(X))

    def to_dict(self):
        return {
            'n_inputs': self.n_inputs,
            'hidden': list(self.hidden),
            'n_classes': self.n_classes,
            'seed': self.seed,
            'name': self.name,
            'activation': 'relu',
            'head': 'sigmoid' if self.n_classes == 2 else 'pinned-softmax',
            'weights': [weight.tolist() for weight in self.weights],
            'biases': [bias.tolist() for bias in self.biases],
        }

    @classmethod
    def from_dict(cls, data, base=None):
        model = cls(data['n_inputs'], data['hidden'], data['n_classes'], data['seed'], data['name'])
        params = []
        for weight, bias in zip(data['weights'], data['biases']):
            params.extend((np.array(weight, dtype=float).reshape(-1, len(bias)), np.array(bias, dtype=float)))
        model.set_parameters(params)
        return model


def forward(m, X):
    """Probabilities of an Mlp for one row or a matrix of rows"""
    X = np.asarray(X, dtype=float)
    proba = m.predict_proba(X)
    return proba[0] if X.ndim == 1 else proba


@register_model("perturbed")
class PerturbedModel(Predictor):
    """Frozen base predictor corrected on the logit scale by an auxiliary Mlp

    The auxiliary network sees a configurable subset of (f(x), x, a) and its
    k-1 outputs are added to the pinned logits of the base probabilities.
    """
    name = "perturbed"
    trainable = True

    def __init__(self, base, aux=None, input_mode=InputMode(), hidden=None, seed=0, clamp=LOGIT_CLAMP, name=None):
        super().__init__(base.n_classes, base.n_inputs, name)
        self.log = logging.getLogger("fairshap.model.PerturbedModel")
        self.base = base
        self.input_mode = InputMode(*input_mode)
        self.clamp = clamp
        if not any(self.input_mode):
            raise ValueError("Auxiliary network needs at least one input")
        if self.input_mode.features and base.n_inputs is None:
            raise DimensionMismatchError("Base predictor does not declare its input width")
        if aux is None:
            if hidden is None:
                hidden = getattr(base, 'hidden', (32,))
            aux = Mlp(self.aux_width, hidden, base.n_classes, seed, name="aux")
            # zero output layer: training starts from the base model
            aux.weights[-1][...] = 0.0
        if aux.n_inputs != self.aux_width or aux.n_classes != base.n_classes:
            raise DimensionMismatchError("Auxiliary network shape %s does not fit %s inputs and %s classes" % (aux.widths, self.aux_width, base.n_classes))
        self.aux = aux

    @property
    def aux_width(self):
        width = 0
        if self.input_mode.score:
            width += self.n_classes - 1
        if self.input_mode.features:
            width += self.base.n_inputs
        if self.input_mode.protected:
            width += 1
        return width

    def parameters(self):
        return self.aux.parameters()

    def set_parameters(self, params):
        self.aux.set_parameters(params)

    def copy(self):
        return PerturbedModel(self.base, self.aux.copy(), self.input_mode, clamp=self.clamp, name=self.name)

    def base_logits(self, proba):
        """Free pinned logits of clamped base probabilities"""
        clamped = clamp_probabilities(proba, self.clamp)
        if np.any(clamped != proba):
            self.log.debug("Clamped %s saturated base scores" % int(np.sum(np.any(clamped != proba, axis=1))))
        return pinned_log(clamped)[:, 1:]

    def aux_inputs(self, X, a, proba):
        parts = []
        if self.input_mode.score:
            parts.append(proba[:, 1:])
        if self.input_mode.features:
            parts.append(X)
        if self.input_mode.protected:
            if a is None:
                raise MissingSideInfoError("Perturbation of %s needs the protected attribute" % self.base.name)
            parts.append(np.asarray(a, dtype=float).reshape(-1, 1))
        return np.hstack(parts)

    def _forward_cache(self, X, a=None):
        X = _as_matrix(X, self.n_inputs)
        proba = self.base.predict_proba(X, a)
        delta, cache = self.aux._forward_cache(self.aux_inputs(X, a, proba))
        return self.base_logits(proba) + delta, cache

    def _backprop(self, cache, grad_free):
        return self.aux._backprop(cache, grad_free)

    def perturbation(self, X, a=None):
        """Auxiliary logit-scale output for each row"""
        X = _as_matrix(X, self.n_inputs)
        return self.aux.logits(self.aux_inputs(X, a, self.base.predict_proba(X, a)))

    def predict_proba(self, X, a=None):
        """Corrected probabilities; rows with a zero perturbation get the base
        probabilities unchanged, bypassing the clamp"""
        X = _as_matrix(X, self.n_inputs)
        proba = self.base.predict_proba(X, a)
        delta = self.aux.logits(self.aux_inputs(X, a, proba))
        corrected = head(self.base_logits(proba) + delta)
        unperturbed = np.all(delta == 0.0, axis=1)
        corrected[unperturbed] = proba[unperturbed]
        return corrected

    def to_dict(self):
        return {'name': self.name, 'clamp': self.clamp, 'input_mode': self.input_mode._asdict(), 'aux': self.aux.to_dict()}

    @classmethod
    def from_dict(cls, data, base=None):
        if base is None:
            raise UnresolvedReferenceError("Perturbed model needs its base predictor")
        return cls(base, Mlp.from_dict(data['aux']), InputMode(**data['input_mode']), clamp=data['clamp'], name=data['name'])


def compose_perturbed(pm, x, a):
    """Probabilities of a perturbed model for one row or a matrix of rows"""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    a = None if a is None else np.broadcast_to(np.asarray(a), (X.shape[0],))
    proba = pm.predict_proba(X, a)
    return proba[0] if single else proba


class DifferencePredictor(Predictor):
    """Pointwise p - q, signed and not a probability"""
    probabilistic = False

    def __init__(self, p, q, name=None):
        if p.n_classes != q.n_classes:
            raise DimensionMismatchError("Cannot subtract %s-class from %s-class predictor" % (q.n_classes, p.n_classes))
        super().__init__(p.n_classes, p.n_inputs, name or "%s-minus-%s" % (p.name, q.name))
        self.p, self.q = p, q

    def predict_proba(self, X, a=None):
        return self.p.predict_proba(X, a) - self.q.predict_proba(X, a)


class SumPredictor(Predictor):
    """Pointwise p + q, used to rebuild f + delta"""
    probabilistic = False

    def __init__(self, p, q, name=None):
        if p.n_classes != q.n_classes:
            raise DimensionMismatchError("Cannot add %s-class and %s-class predictors" % (p.n_classes, q.n_classes))
        super().__init__(p.n_classes, p.n_inputs, name or "%s-plus-%s" % (p.name, q.name))
        self.p, self.q = p, q

    def predict_proba(self, X, a=None):
        return self.p.predict_proba(X, a) + self.q.predict_proba(X, a)


class CallablePredictor(Predictor):
    """Wraps fn(X, a) returning either (n, k) probabilities or, for k=2, the
    (n,) probability of class 1"""

    def __init__(self, fn, n_classes=2, n_inputs=None, name="callable", probabilistic=True):
        super().__init__(n_classes, n_inputs, name)
        self.fn = fn
        self.probabilistic = probabilistic

    def predict_proba(self, X, a=None):
        X = _as_matrix(X, self.n_inputs)
        out = np.asarray(self.fn(X, a), dtype=float)
        if out.ndim == 1:
            if self.n_classes != 2:
                raise DimensionMismatchError("A score vector only describes a binary predictor")
            out = np.stack([1.0 - out, out], axis=1)
        if out.shape != (X.shape[0], self.n_classes):
            raise DimensionMismatchError("Predictor %s returned shape %s" % (self.name, out.shape))
        return np.broadcast_to(out, out.shape).copy()


def constant_predictor(proba, n_inputs=None, name="constant"):
    proba = np.asarray(proba, dtype=float)
    return CallablePredictor(lambda X, a: np.tile(proba, (X.shape[0], 1)), len(proba), n_inputs, name)


def _cross_entropy(free, y):
    """Mean cross-entropy of pinned-head logits and its gradient on the free logits"""
    y = np.asarray(y, dtype=np.int64)
    n = free.shape[0]
    full = np.concatenate([np.zeros((n, 1)), free], axis=1)
    logp = log_softmax(full)
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad[:, 1:] / n


def adversary_input(free, y, notion, n_classes):
    """dp: the free logits; eo: free logits and the label one-hot without its first column"""
    if notion == 'dp':
        return free
    if notion == 'eo':
        onehot = np.eye(n_classes)[np.asarray(y, dtype=np.int64)][:, 1:]
        return np.hstack([free, onehot])
    raise ValueError("Unknown fairness notion %s" % notion)


def _head_vjp(proba, grad_proba):
    """Gradient on the free logits from a gradient on the full probability vector"""
    inner = np.sum(grad_proba * proba, axis=1, keepdims=True)
    return (proba * (grad_proba - inner))[:, 1:]


def _flatten(grads):
    return np.concatenate([np.ravel(g) for g in grads])


def _check_finite(loss, grads):
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteError("Non-finite loss or gradient")


def backward(model, batch, loss_spec):
    """Scalar loss and its gradient for every trainable parameter of `model`

    Adversarial losses treat the adversary as fixed; the returned gradients
    belong to `model` only.
    """
    X, y, a = batch
    free, cache = model._forward_cache(X, a)
    n = free.shape[0]

    if isinstance(loss_spec, SquaredErrorLoss):
        if free.shape[1] != 1:
            raise DimensionMismatchError("Squared error needs a single output unit")
        residual = free[:, 0] - np.asarray(y, dtype=float)
        loss = float(np.mean(residual ** 2))
        grads, _ = model._backprop(cache, (2.0 * residual / n)[:, None])
        _check_finite(loss, grads)
        return loss, grads

    loss, grad_free = _cross_entropy(free, y)

    if isinstance(loss_spec, AdversarialLoss):
        if a is None:
            raise MissingSideInfoError("Adversarial loss needs the protected attribute")
        adversary = loss_spec.adversary
        adv_free, adv_cache = adversary._forward_cache(adversary_input(free, y, loss_spec.notion, model.n_classes))
        adv_loss, adv_grad = _cross_entropy(adv_free, a)
        _, adv_input_grad = adversary._backprop(adv_cache, adv_grad)
        adv_grad_free = adv_input_grad[:, :free.shape[1]]
        total = loss - loss_spec.weight * adv_loss
        if loss_spec.projection:
            ce_grads, _ = model._backprop(cache, grad_free)
            adv_grads, _ = model._backprop(cache, adv_grad_free)
            flat_ce, flat_adv = _flatten(ce_grads), _flatten(adv_grads)
            norm = float(flat_adv @ flat_adv)
            scale = float(flat_ce @ flat_adv) / norm if norm > 0.0 else 0.0
            grads = [g - scale * h - loss_spec.weight * h for g, h in zip(ce_grads, adv_grads)]
            _check_finite(total, grads)
            return total, grads
        loss, grad_free = total, grad_free - loss_spec.weight * adv_grad_free

    if isinstance(loss_spec, SuppressionLoss):
        grads, _ = model._backprop(cache, grad_free)
        free1, cache1 = model._forward_cache(loss_spec.intervene(X, 1), np.ones(n, dtype=np.int64))
        free0, cache0 = model._forward_cache(loss_spec.intervene(X, 0), np.zeros(n, dtype=np.int64))
        proba1, proba0 = head(free1), head(free0)
        gap = proba1[:, 1:] - proba0[:, 1:]
        loss += loss_spec.alpha * float(np.mean(np.sum(np.abs(gap), axis=1)))
        upstream = np.zeros_like(proba1)
        upstream[:, 1:] = loss_spec.alpha * np.sign(gap) / n
        grads1, _ = model._backprop(cache1, _head_vjp(proba1, upstream))
        grads0, _ = model._backprop(cache0, _head_vjp(proba0, -upstream))
        grads = [g + g1 + g0 for g, g1, g0 in zip(grads, grads1, grads0)]
        _check_finite(loss, grads)
        return loss, grads

    if not isinstance(loss_spec, (CrossEntropyLoss, AdversarialLoss)):
        raise ValueError("Unknown loss spec %r" % (loss_spec,))
    grads, _ = model._backprop(cache, grad_free)
    _check_finite(loss, grads)
    return loss, grads


class Adam:
    """Adam update applied in place to a list of parameter arrays"""

    def __init__(self, parameters, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in parameters]
        self.v = [np.zeros_like(p) for p in parameters]

    def step(self, parameters, grads):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for param, grad, m, v in zip(parameters, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def save_model(model, path, base_path=None):
    """Write a versioned JSON model file

    Models wrapping a base predictor store the base's file path relative to
    their own file; `base_path` must name where the base was saved.
    """
    if getattr(model, 'type_name', None) not in MODEL_TYPES:
        raise ValueError("Predictor %s cannot be saved" % model.__class__.__name__)
    data = {'format': MODEL_FORMAT, 'version': MODEL_VERSION, 'type': model.type_name, 'model': model.to_dict()}
    if getattr(model, 'base', None) is not None:
        if base_path is None:
            raise UnresolvedReferenceError("Saving %s needs the path of its base model" % model.name)
        data['base'] = os.path.relpath(base_path, os.path.dirname(os.path.abspath(path)))
    with open(path, "w") as handle:
        json.dump(data, handle, sort_keys=True)
        handle.write("\n")
    log.info("Saved %s model to %s" % (model.type_name, path))


def load_model(path):
    if not os.path.isfile(path):
        raise UnresolvedReferenceError("Model file %s does not exist" % path)
    with open(path) as handle:
        data = json.load(handle)
    if data.get('format') != MODEL_FORMAT or data.get('version') != MODEL_VERSION:
        raise DataFileError("Unsupported model file %s version %s" % (data.get('format'), data.get('version')))
    if data.get('type') not in MODEL_TYPES:
        raise DataFileError("Unknown model type %s in %s" % (data.get('type'), path))
    base = None
    if 'base' in data:
        base = load_model(os.path.join(os.path.dirname(os.path.abspath(path)), data['base']))
    return MODEL_TYPES[data['type']].from_dict(data['model'], base)
