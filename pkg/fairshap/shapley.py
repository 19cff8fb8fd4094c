"""Shapley attribution of accuracy and group fairness to feature groups.

A coalition S keeps the groups of the explained row x and takes every other
group from a background row x', v(S) being the background mean of an integrand
evaluated on the spliced point. The integrand selects what is explained:

    accuracy  f_y
    dp        f_t * (-1)^a / p(a)
    eo        f_y * (-1)^a / P(a | y)
    cdp       f_t * (-1)^a / P(a | v1..vn)

with y the row's label, t a target class and a the row's own protected value,
whatever the spliced point carries. Local values are averaged over the split
(accuracy, dp) or over one conditioning cell (eo, cdp).
"""
from collections import namedtuple
from enum import Enum
import csv
import io
import json
import logging
import math

import numpy as np

from fairshap import fairness_metrics
from fairshap.dataset import Conditioning, Split, empirical_group_rates
from fairshap.exceptions import DimensionMismatchError, EmptyCellError, EstimatorConfigError, \
    MissingSideInfoError, PlayerCapExceededError, UnknownPlayerError
from fairshap.model import DifferencePredictor, SumPredictor

log = logging.getLogger("fairshap.shapley")

EXACT_PLAYER_CAP = 14
MASK_PLAYER_CAP = 62
DEFAULT_PERMUTATIONS = 256
DEFAULT_BACKGROUND = 128
CHUNK_ROWS = 65536
REPORT_VERSION = 1


class ValueKind(Enum):
    ACCURACY = "accuracy"
    DP = "dp"
    EO = "eo"
    CDP = "cdp"


class Aggregation(Enum):
    JOINT_LABEL = "p(x,y)"
    JOINT_PROTECTED = "p(x,a)"
    GIVEN_LABEL = "p(x,a|y)"
    GIVEN_RESOLVING = "p(x,a|v)"


class EstimatorMode(Enum):
    EXACT = "exact"
    SAMPLED = "sampled"


AGGREGATIONS = {
    ValueKind.ACCURACY: Aggregation.JOINT_LABEL,
    ValueKind.DP: Aggregation.JOINT_PROTECTED,
    ValueKind.EO: Aggregation.GIVEN_LABEL,
    ValueKind.CDP: Aggregation.GIVEN_RESOLVING,
}

Player = namedtuple("Player", ['name', 'columns', 'carries_a'])
Background = namedtuple("Background", ['X', 'a'])
SideInfo = namedtuple("SideInfo", ['y', 'a', 'cell'], defaults=[None, None, None])
ValueFunctionSpec = namedtuple("ValueFunctionSpec", ['kind', 'players', 'background', 'rates', 'aggregation', 'split',
                                                     'target_label', 'cell', 'resolving', 'target_class', 'class_prior'])
ShapleyReport = namedtuple("ShapleyReport", ['kind', 'players', 'phi', 'offset', 'total', 'metric_value', 'estimator',
                                             'stderr', 'cell', 'split', 'n_rows'])
PerturbationExplanation = namedtuple("PerturbationExplanation", ['base', 'delta', 'corrected', 'discrepancy'])
LinearityReport = namedtuple("LinearityReport", ['discrepancy', 'combined', 'f', 'delta'])


class CoalitionEstimatorConfig(namedtuple("CoalitionEstimatorConfig", ['mode', 'permutations', 'background_size',
                                                                       'seed', 'exact_cap', 'max_rows'],
                                          defaults=[EstimatorMode.EXACT, DEFAULT_PERMUTATIONS, DEFAULT_BACKGROUND,
                                                    0, EXACT_PLAYER_CAP, None])):
    """mode, permutation count M, background subsample size B (None keeps the
    whole background), seed, exact player cap and an optional row subsample"""
    __slots__ = ()

    def validate(self, n_players=None):
        mode = EstimatorMode(self.mode)
        if mode is EstimatorMode.SAMPLED and (self.permutations is None or self.permutations < 1):
            raise EstimatorConfigError("Sampled estimation needs at least one permutation, got %s" % self.permutations)
        if self.background_size is not None and self.background_size < 1:
            raise EstimatorConfigError("Background size must be positive, got %s" % self.background_size)
        if self.max_rows is not None and self.max_rows < 1:
            raise EstimatorConfigError("Row subsample must be positive, got %s" % self.max_rows)
        if mode is EstimatorMode.EXACT and n_players is not None and n_players > self.exact_cap:
            raise PlayerCapExceededError("Exact enumeration of %s players exceeds the cap of %s" % (n_players, self.exact_cap))
        if n_players is not None and n_players > MASK_PLAYER_CAP:
            raise PlayerCapExceededError("Coalition bitmasks hold at most %s players, got %s" % (MASK_PLAYER_CAP, n_players))
        return self._replace(mode=mode)

    def metadata(self):
        return {
            'mode': EstimatorMode(self.mode).value,
            'permutations': self.permutations if EstimatorMode(self.mode) is EstimatorMode.SAMPLED else None,
            'background_size': self.background_size,
            'seed': self.seed,
            'antithetic': EstimatorMode(self.mode) is EstimatorMode.SAMPLED,
            'max_rows': self.max_rows,
        }


def players_of(ds):
    """Feature groups as players; the protected group also carries a. When X
    lacks the protected group, a becomes a player of its own."""
    players = [Player(g.player_name, tuple(g.column_indices), g.player_name == ds.protected) for g in ds.groups]
    if ds.protected_group is None:
        players.append(Player(ds.protected, (), True))
    return tuple(players)


def value_function_spec(kind, ds, split=Split.TRAIN, background_split=Split.TRAIN, target_label=None, cell=None,
                        resolving=(), target_class=1, drop_empty=False):
    """Spec for one value function, its weights taken from `split`

    eo explains one label cell (default 1); cdp one resolving cell, which may
    be left unset when the report is built per cell.
    """
    kind = ValueKind(kind)
    split = Split(split)
    background_view = ds.view(background_split)
    background = Background(background_view.X, background_view.a)
    rates = None
    if kind is ValueKind.DP:
        rates = empirical_group_rates(ds, Conditioning.NONE, split)
    elif kind is ValueKind.EO:
        rates = empirical_group_rates(ds, Conditioning.LABEL, split, drop_empty=drop_empty)
        target_label = 1 if target_label is None else int(target_label)
    elif kind is ValueKind.CDP:
        rates = empirical_group_rates(ds, Conditioning.RESOLVING, split, resolving, drop_empty=drop_empty)
        if cell is None and len(rates.keys) == 1:
            cell = rates.keys[0]
    labels = ds.view(split).y
    class_prior = np.bincount(labels, minlength=ds.n_classes) / len(labels)
    return ValueFunctionSpec(kind, players_of(ds), background, rates, AGGREGATIONS[kind], split, target_label,
                             None if cell is None else tuple(cell), tuple(resolving), target_class, class_prior)


def _integrand(spec, side_info):
    """(class index, weight) so that the integrand is weight * f_class"""
    kind = ValueKind(spec.kind)
    if kind in (ValueKind.ACCURACY, ValueKind.EO) and side_info.y is None:
        raise MissingSideInfoError("%s value function needs the label y" % kind.value)
    if kind is not ValueKind.ACCURACY and side_info.a is None:
        raise MissingSideInfoError("%s value function needs the protected attribute a" % kind.value)
    if kind is ValueKind.ACCURACY:
        return int(side_info.y), 1.0
    sign = 1.0 if int(side_info.a) == 0 else -1.0
    if kind is ValueKind.DP:
        return spec.target_class, sign / spec.rates.rate((), side_info.a)
    if kind is ValueKind.EO:
        return int(side_info.y), sign / spec.rates.rate((int(side_info.y),), side_info.a)
    if side_info.cell is None:
        raise MissingSideInfoError("cdp value function needs the resolving cell of the row")
    return spec.target_class, sign / spec.rates.rate(side_info.cell, side_info.a)


def _coalition_bits(masks, n_players):
    masks = np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n_players)) & 1).astype(bool)


def _coalition_means(spec, predictor, x, a_x, masks, class_index, background):
    """Background mean of f_class on x_S spliced into every background row, per mask"""
    players = spec.players
    X_bg, a_bg = background
    n_bg, width = X_bg.shape
    bits = _coalition_bits(masks, len(players))
    column_mask = np.zeros((len(bits), width), dtype=bool)
    a_mask = np.zeros(len(bits), dtype=bool)
    for index, player in enumerate(players):
        if player.columns:
            column_mask[:, list(player.columns)] |= bits[:, [index]]
        if player.carries_a:
            a_mask |= bits[:, index]
    means = np.empty(len(bits))
    step = max(1, CHUNK_ROWS // n_bg)
    for start in range(0, len(bits), step):
        stop = min(start + step, len(bits))
        spliced = np.where(column_mask[start:stop, None, :], x[None, None, :], X_bg[None, :, :]).reshape(-1, width)
        spliced_a = np.where(a_mask[start:stop, None], a_x, a_bg[None, :]).reshape(-1)
        proba = predictor.predict_proba(spliced, spliced_a)[:, class_index]
        means[start:stop] = proba.reshape(stop - start, n_bg).mean(axis=1)
    return means


def _check_row(spec, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != spec.background.X.shape[1]:
        raise DimensionMismatchError("Row of shape %s does not match background width %s" % (x.shape, spec.background.X.shape[1]))
    return x


def _mask_of(spec, S):
    if len(spec.players) > MASK_PLAYER_CAP:
        raise PlayerCapExceededError("Coalition bitmasks hold at most %s players, got %s" % (MASK_PLAYER_CAP, len(spec.players)))
    mask = 0
    names = [player.name for player in spec.players]
    for member in S:
        if isinstance(member, str):
            if member not in names:
                raise UnknownPlayerError("No player named %s" % member)
            member = names.index(member)
        if not 0 <= int(member) < len(spec.players):
            raise UnknownPlayerError("Player index %s outside 0..%s" % (member, len(spec.players) - 1))
        mask |= 1 << int(member)
    return mask


def _effective_background(spec, cfg):
    X_bg, a_bg = spec.background
    if not len(X_bg):
        raise EstimatorConfigError("Background is empty")
    if cfg.background_size is None or cfg.background_size >= len(X_bg):
        return Background(X_bg, a_bg)
    rows = np.sort(np.random.default_rng((cfg.seed, 0)).choice(len(X_bg), cfg.background_size, replace=False))
    return Background(X_bg[rows], a_bg[rows])


def value_function(spec, predictor, x, side_info, S, background=None):
    """v(S) for one row: background mean of the integrand at x_S spliced into x'"""
    x = _check_row(spec, x)
    class_index, weight = _integrand(spec, side_info)
    a_x = 0 if side_info.a is None else int(side_info.a)
    background = spec.background if background is None else background
    return weight * float(_coalition_means(spec, predictor, x, a_x, [_mask_of(spec, S)], class_index, background)[0])


def _shapley_weights(n_players):
    total = math.factorial(n_players)
    return np.array([math.factorial(s) * math.factorial(n_players - s - 1) / total for s in range(n_players)])


def _exact_from_table(table, n_players):
    """Shapley values of a game given v over every bitmask 0..2^n-1"""
    masks = np.arange(1 << n_players, dtype=np.int64)
    sizes = _coalition_bits(masks, n_players).sum(axis=1)
    weights = _shapley_weights(n_players)
    phi = np.empty(n_players)
    for player in range(n_players):
        without = masks[((masks >> player) & 1) == 0]
        phi[player] = np.sum(weights[sizes[without]] * (table[without | (1 << player)] - table[without]))
    return phi


def _local_exact(spec, predictor, x, side_info, background, cfg):
    n_players = len(spec.players)
    cfg.validate(n_players)
    class_index, weight = _integrand(spec, side_info)
    a_x = 0 if side_info.a is None else int(side_info.a)
    table = _coalition_means(spec, predictor, x, a_x, np.arange(1 << n_players), class_index, background)
    return weight * _exact_from_table(table, n_players)


def _local_sampled(spec, predictor, x, side_info, background, cfg, row_key):
    n_players = len(spec.players)
    class_index, weight = _integrand(spec, side_info)
    a_x = 0 if side_info.a is None else int(side_info.a)
    rng = np.random.default_rng((cfg.seed, 1, int(row_key)))
    M = cfg.permutations
    orders = np.array([rng.permutation(n_players) for _ in range(M)]).reshape(M, n_players)
    orders = np.concatenate([orders, orders[:, ::-1]])
    prefixes = np.concatenate([np.zeros((2 * M, 1), dtype=np.int64), np.cumsum(1 << orders, axis=1)], axis=1)
    unique, inverse = np.unique(prefixes, return_inverse=True)
    means = _coalition_means(spec, predictor, x, a_x, unique, class_index, background)
    values = means[np.asarray(inverse).reshape(prefixes.shape)]
    contributions = np.zeros((2 * M, n_players))
    np.put_along_axis(contributions, orders, np.diff(values, axis=1), axis=1)
    pairs = weight * 0.5 * (contributions[:M] + contributions[M:])
    stderr = pairs.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros(n_players)
    return pairs.mean(axis=0), stderr


def local_shapley_exact(spec, predictor, x, side_info, cfg=CoalitionEstimatorConfig()):
    """Shapley values of one row by enumerating all 2^n coalitions"""
    x = _check_row(spec, x)
    return _local_exact(spec, predictor, x, side_info, _effective_background(spec, cfg), cfg)


def local_shapley_sampled(spec, predictor, x, side_info, cfg, row_key=0):
    """Permutation-sampling estimate from cfg.permutations orderings, each also
    taken reversed; returns the estimate and its standard error"""
    cfg = cfg.validate(len(spec.players))
    if cfg.mode is not EstimatorMode.SAMPLED:
        raise EstimatorConfigError("local_shapley_sampled needs a sampled estimator config")
    x = _check_row(spec, x)
    return _local_sampled(spec, predictor, x, side_info, _effective_background(spec, cfg), cfg, row_key)


def _cell_rows(spec, ds, split):
    """Rows of the split the value function aggregates over, with their cell keys"""
    view = ds.view(split)
    kind = ValueKind(spec.kind)
    rows = np.arange(len(view.rows))
    cells = [None] * len(rows)
    if kind is ValueKind.EO:
        rows = rows[view.y == spec.target_label]
    elif kind is ValueKind.CDP:
        if spec.cell is None:
            raise MissingSideInfoError("cdp report needs a resolving cell, see global_shapley_cells")
        index = spec.rates.index(spec.cell)
        rows = rows[spec.rates.row_cells == index]
        cells = [spec.cell] * len(view.rows)
    if not len(rows):
        raise EmptyCellError("No %s rows in cell %s" % (Split(split).value, spec.cell or spec.target_label),
                             cells=[spec.cell or (spec.target_label,)])
    return view, rows, cells


def _metric_value(spec, predictor, ds, split):
    kind = ValueKind(spec.kind)
    if kind is ValueKind.ACCURACY:
        return fairness_metrics.expected_accuracy(predictor, ds, split).value
    if kind is ValueKind.DP:
        return fairness_metrics.dp_difference(predictor, ds, split, spec.target_class).signed_components[()]
    if kind is ValueKind.EO:
        return fairness_metrics.eo_difference(predictor, ds, split, labels=(spec.target_label,)).signed_components[(spec.target_label,)]
    return fairness_metrics.cdp_difference(predictor, ds, split, spec.resolving, spec.target_class).signed_components[spec.cell]


def _offset(spec, predictor, background):
    """E over background x' and p(y) of f_y(x'), zero for fairness kinds"""
    if ValueKind(spec.kind) is not ValueKind.ACCURACY:
        return 0.0
    proba = predictor.predict_proba(background.X, background.a)
    return float(np.sum(spec.class_prior * proba.mean(axis=0)))


def global_shapley(spec, predictor, ds, split, cfg=CoalitionEstimatorConfig()):
    """Local values averaged over the aggregation distribution of spec.kind"""
    if Split(split) is not Split(spec.split):
        raise ValueError("Spec weights come from the %s split, cannot aggregate over %s" % (Split(spec.split).value, Split(split).value))
    cfg = cfg.validate(len(spec.players))
    background = _effective_background(spec, cfg)
    view, rows, cells = _cell_rows(spec, ds, split)
    available = len(rows)
    if cfg.max_rows is not None and cfg.max_rows < len(rows):
        rows = np.sort(np.random.default_rng((cfg.seed, 2)).choice(rows, cfg.max_rows, replace=False))

    log.info("Explaining %s of %s on %s rows of %s, %s estimator, %s background rows" % (
        ValueKind(spec.kind).value, predictor.name, len(rows), Split(split).value, cfg.mode.value, len(background.X)))
    phis = np.empty((len(rows), len(spec.players)))
    variances = np.zeros((len(rows), len(spec.players)))
    for position, row in enumerate(rows):
        side_info = SideInfo(int(view.y[row]), int(view.a[row]), cells[row])
        if cfg.mode is EstimatorMode.EXACT:
            phis[position] = _local_exact(spec, predictor, view.X[row], side_info, background, cfg)
        else:
            phis[position], stderr = _local_sampled(spec, predictor, view.X[row], side_info, background, cfg, view.rows[row])
            variances[position] = stderr ** 2
        if position and position % 1000 == 0:
            log.debug("Explained %s of %s rows" % (position, len(rows)))

    phi = phis.mean(axis=0)
    stderr = None
    if cfg.mode is EstimatorMode.SAMPLED:
        stderr = tuple(float(v) for v in np.sqrt(variances.sum(axis=0)) / len(rows))
    estimator = cfg.metadata()
    estimator.update({'background_rows': int(len(background.X)), 'rows_used': int(len(rows)), 'rows_available': int(available)})
    cell = None
    if ValueKind(spec.kind) is ValueKind.EO:
        cell = (spec.target_label,)
    elif ValueKind(spec.kind) is ValueKind.CDP:
        cell = spec.cell
    report = ShapleyReport(ValueKind(spec.kind).value, tuple(p.name for p in spec.players), tuple(float(v) for v in phi),
                           _offset(spec, predictor, background), float(np.sum(phi)),
                           _metric_value(spec, predictor, ds, split), estimator, stderr, cell, Split(split).value, int(len(rows)))
    log.info("%s total %.6f, offset %.6f, metric %.6f" % (report.kind, report.total, report.offset, report.metric_value))
    return report


def global_shapley_cells(spec, predictor, ds, split, cfg=CoalitionEstimatorConfig()):
    """One report per conditioning cell: every label for eo, every retained
    resolving cell for cdp, a single report otherwise"""
    kind = ValueKind(spec.kind)
    if kind is ValueKind.EO:
        return [global_shapley(spec._replace(target_label=key[0]), predictor, ds, split, cfg) for key in spec.rates.keys]
    if kind is ValueKind.CDP:
        return [global_shapley(spec._replace(cell=key), predictor, ds, split, cfg) for key in spec.rates.keys]
    return [global_shapley(spec, predictor, ds, split, cfg)]


def report_residual(report):
    """Sum-rule residual: total (plus offset) minus the independently computed metric"""
    return report.total + report.offset - report.metric_value


def linearity_check(spec, f, delta, ds, cfg=CoalitionEstimatorConfig(), split=None):
    """Largest component-wise gap between the values of f + delta and the sum
    of the values of f and delta, all computed with shared coalitions"""
    if f.n_inputs is not None and delta.n_inputs is not None and f.n_inputs != delta.n_inputs:
        raise DimensionMismatchError("Predictors disagree on inputs: %s against %s" % (f.n_inputs, delta.n_inputs))
    split = spec.split if split is None else split
    combined = global_shapley(spec, SumPredictor(f, delta), ds, split, cfg)
    report_f = global_shapley(spec, f, ds, split, cfg)
    report_delta = global_shapley(spec, delta, ds, split, cfg)
    if combined.players != report_f.players or report_f.players != report_delta.players:
        raise UnknownPlayerError("Reports disagree on players")
    discrepancy = float(np.max(np.abs(np.array(combined.phi) - np.array(report_f.phi) - np.array(report_delta.phi))))
    return LinearityReport(discrepancy, combined, report_f, report_delta)


def explain_perturbation(spec, perturbed, ds, split, cfg=CoalitionEstimatorConfig()):
    """Reports for the frozen base, the perturbation f_theta - f and the corrected model"""
    delta = DifferencePredictor(perturbed, perturbed.base, name="perturbation")
    base = global_shapley(spec, perturbed.base, ds, split, cfg)
    delta_report = global_shapley(spec, delta, ds, split, cfg)
    corrected = global_shapley(spec, perturbed, ds, split, cfg)
    discrepancy = float(np.max(np.abs(np.array(corrected.phi) - np.array(base.phi) - np.array(delta_report.phi))))
    log.info("Perturbation explanation of %s: linearity discrepancy %.3g" % (ValueKind(spec.kind).value, discrepancy))
    return PerturbationExplanation(base, delta_report, corrected, discrepancy)


def report_to_dict(report):
    data = report._asdict()
    data['players'] = list(report.players)
    data['phi'] = list(report.phi)
    data['stderr'] = None if report.stderr is None else list(report.stderr)
    data['cell'] = None if report.cell is None else list(report.cell)
    data['version'] = REPORT_VERSION
    return data


def report_from_dict(data):
    data = dict(data)
    data.pop('version', None)
    data['players'] = tuple(data['players'])
    data['phi'] = tuple(data['phi'])
    data['stderr'] = None if data['stderr'] is None else tuple(data['stderr'])
    data['cell'] = None if data['cell'] is None else tuple(data['cell'])
    return ShapleyReport(**data)


def write_report_json(report, path):
    with open(path, "w") as handle:
        json.dump(report_to_dict(report), handle, indent=2, sort_keys=True)
        handle.write("\n")


def read_report_json(path):
    with open(path) as handle:
        return report_from_dict(json.load(handle))


def report_csv(report):
    """One line per player, then offset, total and metric value"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["player", "phi", "stderr"])
    for index, (player, phi) in enumerate(zip(report.players, report.phi)):
        writer.writerow([player, repr(phi), "" if report.stderr is None else repr(report.stderr[index])])
    writer.writerow(["(offset)", repr(report.offset), ""])
    writer.writerow(["(total)", repr(report.total), ""])
    writer.writerow(["(metric)", repr(report.metric_value), ""])
    return buffer.getvalue()
