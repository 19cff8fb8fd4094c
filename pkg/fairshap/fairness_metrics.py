"""Expected (soft) accuracy and fairness differences, their hard-prediction
variants and accuracy-at-fairness-threshold tables.

Signed differences always read group 0 minus group 1.
"""
from collections import namedtuple
import csv
import io
import logging

import numpy as np

from fairshap.dataset import Conditioning, Split, empirical_group_rates
from fairshap.exceptions import EmptyCellError

log = logging.getLogger("fairshap.fairness_metrics")

DEFAULT_THRESHOLDS = (0.1, 0.08, 0.06, 0.04, 0.02, 0.01, 0.005)
DEFAULT_BINS = ((0.05, 0.1), (0.025, 0.05), (0.01, 0.025), (0.0, 0.01))

MetricResult = namedtuple("MetricResult", ['name', 'value', 'signed_components', 'split', 'n', 'extra'], defaults=[None])
TableRun = namedtuple("TableRun", ['method', 'accuracy', 'fairness'])
ThresholdTable = namedtuple("ThresholdTable", ['notion', 'thresholds', 'methods', 'rows'])
FairnessBin = namedtuple("FairnessBin", ['lower', 'upper', 'count', 'mean', 'variance'])


def _scores(predictor, X, a, hard=False):
    """Class probabilities, or one-hot hard predictions when `hard` is set"""
    if hard:
        return np.eye(predictor.n_classes)[predictor.predict(X, a)]
    return predictor.predict_proba(X, a)


def _group_gap(values, a, key):
    """mean over a=0 minus mean over a=1"""
    missing = [group for group in (0, 1) if not np.any(a == group)]
    if missing:
        raise EmptyCellError("Cell %s has no rows with a=%s" % (key, missing[0]), cells=[key])
    return float(values[a == 0].mean() - values[a == 1].mean())


def expected_accuracy(predictor, ds, split=Split.TEST):
    """Mean of f_y(x), the accuracy of a classifier sampling labels from f; hard
    argmax accuracy is reported in extra"""
    X, y, a, _ = ds.view(split)
    proba = predictor.predict_proba(X, a)
    value = float(np.mean(proba[np.arange(len(y)), y]))
    extra = {}
    if predictor.probabilistic:
        extra['hard_accuracy'] = float(np.mean(predictor.predict(X, a) == y))
    return MetricResult('expected_accuracy', value, {}, Split(split).value, len(y), extra)


def hard_accuracy(predictor, ds, split=Split.TEST):
    X, y, a, _ = ds.view(split)
    return MetricResult('hard_accuracy', float(np.mean(predictor.predict(X, a) == y)), {}, Split(split).value, len(y), {})


def dp_difference(predictor, ds, split=Split.TEST, target_class=1, hard=False):
    X, _, a, _ = ds.view(split)
    values = _scores(predictor, X, a, hard)[:, target_class]
    signed = _group_gap(values, a, ())
    return MetricResult('dp_difference', abs(signed), {(): signed}, Split(split).value, len(a),
                        {'signed': signed, 'target_class': target_class, 'hard': hard})


def eo_difference(predictor, ds, split=Split.TEST, hard=False, labels=None):
    """Per-label gaps in expected sensitivity E[f_y | y, a]; the scalar is the
    largest absolute gap over labels"""
    X, y, a, _ = ds.view(split)
    scores = _scores(predictor, X, a, hard)
    labels = range(ds.n_classes) if labels is None else labels
    components = {}
    for label in labels:
        members = y == label
        components[(int(label),)] = _group_gap(scores[members, label], a[members], (int(label),))
    value = max(abs(v) for v in components.values())
    return MetricResult('eo_difference', value, components, Split(split).value, len(y), {'hard': hard})


def eop_difference(predictor, ds, split=Split.TEST, hard=False):
    """Equal opportunity: the y=1 component of eo_difference"""
    result = eo_difference(predictor, ds, split, hard, labels=(1,))
    return result._replace(name='eop_difference')


def cdp_difference(predictor, ds, split=Split.TEST, resolving=(), target_class=1, hard=False):
    """DP difference within every cell of the resolving variables

    Cells lacking one protected group are dropped and listed in extra.
    """
    rates = empirical_group_rates(ds, Conditioning.RESOLVING, split, resolving, drop_empty=True)
    X, _, a, _ = ds.view(split)
    values = _scores(predictor, X, a, hard)[:, target_class]
    components = {}
    for index, key in enumerate(rates.keys):
        members = rates.row_cells == index
        components[key] = _group_gap(values[members], a[members], key)
    signed = np.array([components[key] for key in rates.keys])
    weighted = float(np.sum(rates.cell_weights * signed) / np.sum(rates.cell_weights))
    value = float(np.max(np.abs(signed)))
    return MetricResult('cdp_difference', value, components, Split(split).value, int(np.sum(rates.row_cells >= 0)),
                        {'weighted_mean': weighted, 'dropped': list(rates.dropped), 'resolving': list(rates.resolving),
                         'target_class': target_class, 'hard': hard})


def agreement(p, q, ds, split=Split.TEST):
    """Fraction of rows on which two predictors make the same hard prediction"""
    X, _, a, _ = ds.view(split)
    return float(np.mean(p.predict(X, a) == q.predict(X, a)))


def intervention_gap(predictor, ds, split=Split.TEST):
    """Mean |f(do(a=1)) - f(do(a=0))| summed over the non-reference classes"""
    X, _, a, _ = ds.view(split)
    ones, zeros = np.ones(len(a), dtype=np.int64), np.zeros(len(a), dtype=np.int64)
    gap = predictor.predict_proba(ds.intervene(X, 1), ones)[:, 1:] - predictor.predict_proba(ds.intervene(X, 0), zeros)[:, 1:]
    value = float(np.mean(np.sum(np.abs(gap), axis=1)))
    return MetricResult('intervention_gap', value, {}, Split(split).value, len(a), {})


def fairness_metric(notion, predictor, ds, split=Split.TEST, resolving=(), hard=False):
    if notion == 'dp':
        return dp_difference(predictor, ds, split, hard=hard)
    if notion == 'eo':
        return eo_difference(predictor, ds, split, hard=hard)
    if notion == 'eop':
        return eop_difference(predictor, ds, split, hard=hard)
    if notion == 'cdp':
        return cdp_difference(predictor, ds, split, resolving, hard=hard)
    raise ValueError("Unknown fairness notion %s" % notion)


def metric_to_dict(result):
    extra = dict(result.extra or {})
    if 'dropped' in extra:
        extra['dropped'] = [list(key) for key in extra['dropped']]
    return {
        'name': result.name,
        'value': result.value,
        'signed_components': [{'cell': list(key), 'signed': value} for key, value in result.signed_components.items()],
        'split': result.split,
        'n': result.n,
        'extra': extra,
    }


def threshold_table(run_set, thresholds=DEFAULT_THRESHOLDS, notion='dp'):
    """Best hard accuracy per method among runs whose fairness value is within
    each threshold, None where no run qualifies"""
    run_set = list(run_set)
    if not run_set:
        raise ValueError("Threshold table needs at least one run")
    thresholds = tuple(float(t) for t in thresholds)
    if any(later > earlier for earlier, later in zip(thresholds, thresholds[1:])):
        raise ValueError("Thresholds must be descending, got %s" % (thresholds,))
    methods = []
    for run in run_set:
        if run.method not in methods:
            methods.append(run.method)
    rows = []
    for method in methods:
        runs = [run for run in run_set if run.method == method]
        row = []
        for threshold in thresholds:
            feasible = [run.accuracy for run in runs if run.fairness <= threshold]
            row.append(100.0 * max(feasible) if feasible else None)
        rows.append(tuple(row))
    return ThresholdTable(notion, thresholds, tuple(methods), tuple(rows))


def _cell_text(value):
    return "-" if value is None else "%.2f" % value


def render_table_text(table):
    header = ["Method"] + ["%g" % t for t in table.thresholds]
    body = [[method] + [_cell_text(v) for v in row] for method, row in zip(table.methods, table.rows)]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["Accuracy [%%] at %s difference thresholds" % table.notion.upper()]
    for line in [header] + body:
        lines.append("  ".join(cell.ljust(width) if i == 0 else cell.rjust(width) for i, (cell, width) in enumerate(zip(line, widths))))
    return "\n".join(lines) + "\n"


def render_table_csv(table):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method"] + ["%g" % t for t in table.thresholds])
    for method, row in zip(table.methods, table.rows):
        writer.writerow([method] + [_cell_text(v) for v in row])
    return buffer.getvalue()


def fairness_bins(runs, edges=DEFAULT_BINS):
    """Count, mean and sample variance of accuracy for runs falling in each
    [lower, upper) fairness bin"""
    bins = []
    for lower, upper in edges:
        accuracies = np.array([run.accuracy for run in runs if lower <= run.fairness < upper], dtype=float)
        mean = float(accuracies.mean()) if len(accuracies) else None
        variance = float(accuracies.var(ddof=1)) if len(accuracies) > 1 else None
        bins.append(FairnessBin(lower, upper, len(accuracies), mean, variance))
    return bins


def render_bins_csv(bins_by_method):
    """One line per method and fairness bin; empty mean or variance where undefined"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method", "lower", "upper", "count", "mean", "variance"])
    for method, bins in bins_by_method.items():
        for b in bins:
            writer.writerow([method, "%g" % b.lower, "%g" % b.upper, b.count,
                             "" if b.mean is None else "%.6f" % b.mean, "" if b.variance is None else "%.6g" % b.variance])
    return buffer.getvalue()
