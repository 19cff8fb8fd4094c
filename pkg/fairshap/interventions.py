"""Model variants: baseline training, adversarial debiasing of a fresh model or
of a perturbation to a frozen base, suppression retraining and the two score
post-processors (quantile repair and equalized-odds randomized thresholds).
"""
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
import itertools
import logging

import numpy as np

from fairshap import fairness_metrics
from fairshap.dataset import Split
from fairshap.exceptions import DegenerateDistributionError, DimensionMismatchError, DivergenceError, \
    EmptyCellError, MissingSideInfoError, NonFiniteError, TrainConfigError, UnknownPlayerError
from fairshap.model import Adam, AdversarialLoss, Batch, CrossEntropyLoss, InputMode, Mlp, PerturbedModel, \
    Predictor, SuppressionLoss, adversary_input, backward, register_model

log = logging.getLogger("fairshap.interventions")

DEFAULT_SWEEP_WEIGHTS = tuple(float(w) for w in np.logspace(-2, 1, 7))
DEFAULT_REPAIR_LEVELS = tuple(float(level) for level in np.linspace(0.0, 1.0, 11))
HARDT_GRID_STEP = 1e-3

TrainLogEntry = namedtuple("TrainLogEntry", ['iteration', 'train_loss', 'validation_loss', 'validation_accuracy',
                                             'validation_fairness', 'checkpointed'])
TrainLog = namedtuple("TrainLog", ['method', 'entries', 'restored_iteration'])
Fresh = namedtuple("Fresh", ['hidden'], defaults=[(50,)])
Perturbation = namedtuple("Perturbation", ['base', 'input_mode', 'hidden'], defaults=[InputMode(), None])
Run = namedtuple("Run", ['method', 'weight', 'seed', 'settings', 'predictor', 'log', 'accuracy', 'fairness'])


class TrainConfig(namedtuple("TrainConfig", ['iterations', 'batch_size', 'learning_rate', 'adversary_learning_rate',
                                             'adversary_hidden', 'notion', 'adversary_weight', 'adversary_steps',
                                             'seed', 'eval_every', 'projection', 'checkpoint'],
                             defaults=[2000, 512, 1e-3, 1e-2, (32,), 'dp', 0.0, 1, 0, 50, False, True])):
    """Training settings; the checkpoint flag restores the parameters with the
    best validation loss over the second half of training"""
    __slots__ = ()

    def validate(self):
        for field in ('iterations', 'batch_size', 'adversary_steps', 'eval_every'):
            if int(getattr(self, field)) < 1:
                raise TrainConfigError("%s must be positive, got %s" % (field, getattr(self, field)))
        for field in ('learning_rate', 'adversary_learning_rate'):
            if not getattr(self, field) > 0.0:
                raise TrainConfigError("%s must be positive, got %s" % (field, getattr(self, field)))
        if self.adversary_weight < 0.0:
            raise TrainConfigError("Adversary weight must not be negative, got %s" % self.adversary_weight)
        if self.notion not in ('dp', 'eo'):
            raise TrainConfigError("Adversarial training supports dp and eo, not %s" % self.notion)
        return self


def _batches(n_rows, batch_size, rng):
    """Endless minibatch indices, reshuffled every epoch"""
    while True:
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, batch_size):
            yield order[start:start + batch_size]


def _snapshot(*models):
    return [[p.copy() for p in model.parameters()] for model in models if model is not None]


def _restore(snapshot, *models):
    for params, model in zip(snapshot, [m for m in models if m is not None]):
        model.set_parameters(params)


def _train(model, ds, cfg, loss_spec, method, adversary=None):
    """Shared minibatch loop: optional adversary steps, one model step, periodic
    validation and checkpointing"""
    logger = logging.getLogger("fairshap.interventions.train")
    train = ds.view(Split.TRAIN)
    validation = ds.view(Split.VALIDATION)
    validation_batch = Batch(validation.X, validation.y, validation.a)
    rng = np.random.default_rng((cfg.seed, 3))
    batches = _batches(len(train.y), cfg.batch_size, rng)
    optimizer = Adam(model.parameters(), cfg.learning_rate)
    adversary_optimizer = Adam(adversary.parameters(), cfg.adversary_learning_rate) if adversary is not None else None

    logger.info("Training %s for %s iterations, batch %s" % (method, cfg.iterations, cfg.batch_size))
    entries, best = [], None
    for iteration in range(1, cfg.iterations + 1):
        rows = next(batches)
        batch = Batch(train.X[rows], train.y[rows], train.a[rows])
        try:
            if adversary is not None:
                for _ in range(cfg.adversary_steps):
                    free = model._forward_cache(batch.X, batch.a)[0]
                    adversary_batch = Batch(adversary_input(free, batch.y, cfg.notion, model.n_classes), batch.a)
                    _, adversary_grads = backward(adversary, adversary_batch, CrossEntropyLoss())
                    adversary_optimizer.step(adversary.parameters(), adversary_grads)
            loss, grads = backward(model, batch, loss_spec)
            optimizer.step(model.parameters(), grads)
        except NonFiniteError as e:
            raise DivergenceError("%s diverged at iteration %s: %s" % (method, iteration, e))

        if iteration % cfg.eval_every == 0 or iteration == cfg.iterations:
            try:
                validation_loss, _ = backward(model, validation_batch, loss_spec)
            except NonFiniteError as e:
                raise DivergenceError("%s diverged at iteration %s: %s" % (method, iteration, e))
            accuracy = fairness_metrics.hard_accuracy(model, ds, Split.VALIDATION).value
            fairness = fairness_metrics.fairness_metric(cfg.notion, model, ds, Split.VALIDATION).value
            checkpointed = bool(cfg.checkpoint and iteration > cfg.iterations // 2 and (best is None or validation_loss < best[0]))
            if checkpointed:
                best = (validation_loss, iteration, _snapshot(model, adversary))
            entries.append(TrainLogEntry(iteration, float(loss), float(validation_loss), accuracy, fairness, checkpointed))
            logger.debug("%s iteration %s: train loss %.5f, validation loss %.5f, accuracy %.4f, %s %.4f" % (
                method, iteration, loss, validation_loss, accuracy, cfg.notion, fairness))

    restored = None
    if best is not None:
        _restore(best[2], model, adversary)
        restored = best[1]
        logger.info("Restored %s checkpoint of iteration %s, validation loss %.5f" % (method, restored, best[0]))
    return TrainLog(method, tuple(entries), restored)


def _build_model(ds, arch, seed):
    if isinstance(arch, Mlp):
        if arch.n_inputs != ds.n_features or arch.n_classes != ds.n_classes:
            raise DimensionMismatchError("Network %s does not fit %s features and %s classes" % (arch.widths, ds.n_features, ds.n_classes))
        return arch.copy()
    return Mlp(ds.n_features, tuple(arch), ds.n_classes, seed, name="mlp")


def train_baseline(ds, arch=(50,), cfg=TrainConfig()):
    """Cross-entropy training of an Mlp; arch is a tuple of hidden widths or an
    initialised network"""
    cfg = cfg.validate()
    model = _build_model(ds, arch, cfg.seed)
    train_log = _train(model, ds, cfg, CrossEntropyLoss(), "baseline")
    model.name = "baseline"
    return model, train_log


def _check_adversary(adversary, model, ds, cfg):
    validation = ds.view(Split.VALIDATION)
    free = model._forward_cache(validation.X, validation.a)[0]
    output = adversary.predict_proba(adversary_input(free, validation.y, cfg.notion, model.n_classes))[:, 1]
    if float(np.std(output)) < 1e-6:
        log.warning("Adversary output collapsed to the constant %.4f" % float(output.mean()))


def train_adversarial(ds, target, cfg):
    """Alternating adversarial debiasing

    target is Fresh(hidden) for a new network or Perturbation(base, ...) to
    learn a logit-scale correction of a frozen base. The adversary predicts a
    from the model's free logits (dp) or from the logits and the label (eo);
    the model minimises cross-entropy minus the weighted adversary loss.
    """
    cfg = cfg.validate()
    if isinstance(target, Perturbation):
        if target.base.n_classes != ds.n_classes:
            raise DimensionMismatchError("Base predictor has %s classes, data %s" % (target.base.n_classes, ds.n_classes))
        model = PerturbedModel(target.base, input_mode=target.input_mode, hidden=target.hidden, seed=cfg.seed)
        method = "adv-perturbed"
    elif isinstance(target, Fresh):
        model = _build_model(ds, target.hidden, cfg.seed)
        method = "adv-fresh"
    else:
        raise ValueError("Unknown adversarial target %r" % (target,))
    width = (ds.n_classes - 1) * (2 if cfg.notion == 'eo' else 1)
    adversary = Mlp(width, cfg.adversary_hidden, 2, cfg.seed + 1, name="adversary")
    loss_spec = AdversarialLoss(adversary, cfg.adversary_weight, cfg.notion, cfg.projection)
    train_log = _train(model, ds, cfg, loss_spec, method, adversary)
    _check_adversary(adversary, model, ds, cfg)
    model.name = method
    return model, train_log


def suppression_retrain(base, ds, alpha, batches, cfg=TrainConfig()):
    """Continue training a copy of `base` for `batches` steps with cross-entropy
    plus alpha times the mean output change under do(a=1) against do(a=0)"""
    if ds.protected_group is None:
        raise UnknownPlayerError("Suppression needs the protected attribute among the inputs")
    cfg = cfg._replace(iterations=int(batches), checkpoint=False).validate()
    model = base.copy()
    train_log = _train(model, ds, cfg, SuppressionLoss(ds.intervene, float(alpha)), "suppress")
    model.name = "suppressed"
    return model, train_log


@register_model("feldman")
class FeldmanRepair(Predictor):
    """Scores moved toward the pooled score distribution:
    s -> (1 - repair) s + repair Q_pooled(F_a(s))"""
    name = "feldman"

    def __init__(self, base, repair, group_scores, pooled_scores, name=None):
        super().__init__(base.n_classes, base.n_inputs, name)
        if base.n_classes != 2:
            raise DimensionMismatchError("Score repair needs a binary predictor")
        if not 0.0 <= repair <= 1.0:
            raise ValueError("Repair level must lie in [0, 1], got %s" % repair)
        self.base = base
        self.repair = float(repair)
        self.group_scores = [np.sort(np.asarray(scores, dtype=float)) for scores in group_scores]
        self.pooled_scores = np.sort(np.asarray(pooled_scores, dtype=float))

    def repaired_scores(self, scores, a):
        scores = np.asarray(scores, dtype=float)
        a = np.asarray(a, dtype=np.int64)
        repaired = scores.copy()
        for group, reference in enumerate(self.group_scores):
            members = a == group
            if not np.any(members):
                continue
            ranks = np.searchsorted(reference, scores[members], side='right') / len(reference)
            target = np.quantile(self.pooled_scores, ranks, method='inverted_cdf')
            repaired[members] = (1.0 - self.repair) * scores[members] + self.repair * target
        return np.clip(repaired, 0.0, 1.0)

    def predict_proba(self, X, a=None):
        if a is None:
            raise MissingSideInfoError("Score repair needs the protected attribute at inference")
        scores = self.repaired_scores(self.base.predict_proba(X, a)[:, 1], a)
        return np.stack([1.0 - scores, scores], axis=1)

    def to_dict(self):
        return {'name': self.name, 'repair': self.repair, 'group_scores': [s.tolist() for s in self.group_scores],
                'pooled_scores': self.pooled_scores.tolist()}

    @classmethod
    def from_dict(cls, data, base=None):
        return cls(base, data['repair'], data['group_scores'], data['pooled_scores'], data['name'])


def feldman_postprocess(base, ds, repair, split=Split.TRAIN):
    """Fit the per-group score CDFs and the pooled quantiles on `split`"""
    X, _, a, _ = ds.view(split)
    scores = base.predict_proba(X, a)[:, 1]
    group_scores = []
    for group in (0, 1):
        members = scores[a == group]
        if not len(members):
            raise EmptyCellError("No %s rows with a=%s" % (Split(split).value, group), cells=[(group,)])
        if np.ptp(members) == 0.0:
            raise DegenerateDistributionError("Scores of group %s are constant" % group)
        group_scores.append(members)
    return FeldmanRepair(base, repair, group_scores, scores)


HullPoint = namedtuple("HullPoint", ['fpr', 'tpr', 'threshold'])
GroupMix = namedtuple("GroupMix", ['low_threshold', 'high_threshold', 'beta', 'weight'])


def roc_points(scores, labels):
    """(FPR, TPR, threshold) of every rule `predict 1 when score >= threshold`,
    from predicting nothing (threshold 2) to predicting everything"""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    positives = np.sort(scores[labels == 1])
    negatives = np.sort(scores[labels == 0])
    thresholds = np.concatenate([[2.0], np.unique(scores)[::-1]])
    tpr = 1.0 - np.searchsorted(positives, thresholds, side='left') / len(positives)
    fpr = 1.0 - np.searchsorted(negatives, thresholds, side='left') / len(negatives)
    return [HullPoint(float(f), float(t), float(th)) for f, t, th in zip(fpr, tpr, thresholds)]


def upper_hull(points):
    """Upper concave hull of ROC points ordered by FPR"""
    best = {}
    for point in points:
        if point.fpr not in best or point.tpr > best[point.fpr].tpr:
            best[point.fpr] = point
    hull = []
    for point in sorted(best.values()):
        while len(hull) >= 2:
            (x1, y1, _), (x2, y2, _) = hull[-2], hull[-1]
            if (x2 - x1) * (point.tpr - y1) - (y2 - y1) * (point.fpr - x1) >= 0.0:
                hull.pop()
            else:
                break
        hull.append(point)
    return hull


def _hull_tpr(hull, fpr):
    return np.interp(fpr, [p.fpr for p in hull], [p.tpr for p in hull])


def _group_mix(hull, fpr, tpr):
    """Mix two hull thresholds to reach (fpr, hull(fpr)), then blend with a
    Bernoulli(fpr) coin to come down to tpr"""
    fprs = np.array([p.fpr for p in hull])
    upper = int(np.clip(np.searchsorted(fprs, fpr, side='left'), 1, len(hull) - 1))
    low, high = hull[upper - 1], hull[upper]
    beta = 0.0 if high.fpr == low.fpr else (fpr - low.fpr) / (high.fpr - low.fpr)
    reachable = (1.0 - beta) * low.tpr + beta * high.tpr
    weight = 1.0 if reachable - fpr <= 1e-12 else (tpr - fpr) / (reachable - fpr)
    return GroupMix(low.threshold, high.threshold, float(beta), float(np.clip(weight, 0.0, 1.0)))


@register_model("hardt")
class HardtRule(Predictor):
    """Randomized per-group decision rule with equal TPR and FPR across groups

    predict_proba gives P(y_hat = 1 | score, a); predict draws from it with a
    seeded generator.
    """
    name = "hardt"

    def __init__(self, base, mixes, fpr, tpr, seed=0, name=None):
        super().__init__(base.n_classes, base.n_inputs, name)
        self.base = base
        self.mixes = [GroupMix(*mix) for mix in mixes]
        self.fpr = float(fpr)
        self.tpr = float(tpr)
        self.seed = seed

    def positive_rate(self, scores, a):
        scores = np.asarray(scores, dtype=float)
        a = np.asarray(a, dtype=np.int64)
        rate = np.empty(len(scores))
        for group, mix in enumerate(self.mixes):
            members = a == group
            s = scores[members]
            thresholded = (1.0 - mix.beta) * (s >= mix.low_threshold) + mix.beta * (s >= mix.high_threshold)
            rate[members] = mix.weight * thresholded + (1.0 - mix.weight) * self.fpr
        return rate

    def predict_proba(self, X, a=None):
        if a is None:
            raise MissingSideInfoError("Equalized-odds rule needs the protected attribute at inference")
        rate = self.positive_rate(self.base.predict_proba(X, a)[:, 1], a)
        return np.stack([1.0 - rate, rate], axis=1)

    def predict(self, X, a=None):
        rate = self.predict_proba(X, a)[:, 1]
        return (np.random.default_rng(self.seed).random(len(rate)) < rate).astype(np.int64)

    def to_dict(self):
        return {'name': self.name, 'mixes': [list(mix) for mix in self.mixes], 'fpr': self.fpr, 'tpr': self.tpr, 'seed': self.seed}

    @classmethod
    def from_dict(cls, data, base=None):
        return cls(base, data['mixes'], data['fpr'], data['tpr'], data['seed'], data['name'])


def hardt_postprocess(base, ds, split=Split.VALIDATION, seed=0):
    """Pick the common (FPR, TPR) below both groups' ROC hulls that minimises
    expected error on `split`, on an FPR grid of step 1e-3"""
    if base.n_classes != 2:
        raise DimensionMismatchError("Equalized-odds post-processing needs a binary predictor")
    X, y, a, _ = ds.view(split)
    scores = base.predict_proba(X, a)[:, 1]
    hulls = []
    for group in (0, 1):
        for label in (0, 1):
            if not np.any((a == group) & (y == label)):
                raise EmptyCellError("No %s rows with a=%s, y=%s" % (Split(split).value, group, label), cells=[(label, group)])
        members = a == group
        if np.ptp(scores[members]) == 0.0:
            raise DegenerateDistributionError("Scores of group %s are constant, its ROC curve is degenerate" % group)
        hulls.append(upper_hull(roc_points(scores[members], y[members])))

    grid = np.linspace(0.0, 1.0, int(round(1.0 / HARDT_GRID_STEP)) + 1)
    common_tpr = np.minimum(_hull_tpr(hulls[0], grid), _hull_tpr(hulls[1], grid))
    positive_rate = float(np.mean(y == 1))
    error = positive_rate * (1.0 - common_tpr) + (1.0 - positive_rate) * grid
    best = int(np.argmin(error))
    fpr, tpr = float(grid[best]), float(common_tpr[best])
    mixes = [_group_mix(hull, fpr, tpr) for hull in hulls]
    log.info("Equalized-odds operating point FPR %.3f TPR %.3f, expected error %.4f" % (fpr, tpr, error[best]))
    return HardtRule(base, mixes, fpr, tpr, seed)


def score_run(method, weight, seed, settings, predictor, train_log, ds, notion):
    """Run record with hard accuracy and fairness on the test split"""
    accuracy = fairness_metrics.hard_accuracy(predictor, ds, Split.TEST).value
    fairness = fairness_metrics.fairness_metric(notion, predictor, ds, Split.TEST).value
    return Run(method, weight, seed, settings, predictor, train_log, accuracy, fairness)


def lambda_sweep(ds, target, cfg, weights=DEFAULT_SWEEP_WEIGHTS):
    """One adversarial run per adversary weight, scored on the test split"""
    runs = []
    for weight in weights:
        predictor, train_log = train_adversarial(ds, target, cfg._replace(adversary_weight=float(weight)))
        runs.append(score_run(train_log.method, float(weight), cfg.seed, cfg._asdict(), predictor, train_log, ds, cfg.notion))
        log.info("Sweep %s weight %.4g: accuracy %.4f, %s %.4f" % (train_log.method, weight, runs[-1].accuracy, cfg.notion, runs[-1].fairness))
    return runs


def repair_sweep(base, ds, levels=DEFAULT_REPAIR_LEVELS, notion='dp'):
    """Feldman repair at every level, scored on the test split"""
    runs = []
    for level in levels:
        predictor = feldman_postprocess(base, ds, level)
        runs.append(score_run("feldman", float(level), None, {'repair': float(level)}, predictor, None, ds, notion))
    return runs


def expand_grid(grid):
    """Every combination of the grid's axes, keys in sorted order"""
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[key] for key in keys))]


def _grid_run(task):
    ds, base, settings, seed, cfg = task
    cfg = cfg._replace(seed=seed, **dict((k, v) for k, v in settings.items() if k in TrainConfig._fields))
    hidden = tuple(settings.get('hidden', (50,)))
    runs = []
    for method, target in (("adv-fresh", Fresh(hidden)), ("adv-perturbed", Perturbation(base, InputMode(), hidden))):
        predictor, train_log = train_adversarial(ds, target, cfg)
        runs.append(score_run(method, cfg.adversary_weight, seed, dict(settings), predictor, train_log, ds, cfg.notion))
    return runs


def stability_grid(ds, base, grid, seeds, cfg=TrainConfig(), processes=None):
    """Fresh and perturbation-target adversarial runs for every grid point and
    seed. Grid axes are TrainConfig fields plus `hidden`, the network widths of
    the fresh model and of the auxiliary network."""
    unknown = [key for key in grid if key not in TrainConfig._fields and key != 'hidden']
    if unknown:
        raise TrainConfigError("Unknown grid axes %s" % ", ".join(unknown))
    tasks = [(ds, base, settings, seed, cfg) for settings in expand_grid(grid) for seed in seeds]
    log.info("Stability grid: %s settings x %s seeds" % (len(tasks) // max(len(seeds), 1), len(seeds)))
    if processes:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            results = list(pool.map(_grid_run, tasks))
    else:
        results = [_grid_run(task) for task in tasks]
    return [run for runs in results for run in runs]


def parameters_equal(first, second):
    """Bit-identical parameter arrays"""
    first, second = first.parameters(), second.parameters()
    return len(first) == len(second) and all(np.array_equal(p, q) for p, q in zip(first, second))
