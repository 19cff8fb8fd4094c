"""Pipeline orchestration and the `fairshap` command.

Artifacts live below the output directory:

    data/                 encoded dataset bundle
    models/<name>.json    model files, perturbed and post-processed ones
                          referencing models/baseline.json
    logs/<name>.json      training logs
    reports/<name>-<kind>[-<cell>].json|.csv
    metrics/<name>.json
    plots/<report>.svg
    tables/<notion>.txt|.csv, tables/<notion>-runs.json
    tables/stability-<notion>-bins.csv|.json, tables/stability-<notion>-runs.json
    verify.json
    manifest.json

Every stage writes into a private directory first and moves its files into
place once it succeeded.
"""
import argparse
import contextlib
import glob
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np
from pydantic import ValidationError

from fairshap import __version__, fairness_metrics, interventions, render, shapley
from fairshap.config import ExperimentConfig
from fairshap.dataset import Split, load_adult, load_bundle, load_compas, make_synthetic, save_bundle
from fairshap.exceptions import BaseException as FairshapError
from fairshap.exceptions import StageError, UnresolvedReferenceError
from fairshap.model import Mlp, PerturbedModel, load_model, save_model

log = logging.getLogger("fairshap.cli")

STAGE_ORDER = ('prepare', 'train', 'explain', 'evaluate', 'plot', 'verify', 'sweep', 'stability')
ADULT_FILES = ('adult.data', 'adult.test')
COMPAS_FILE = 'compas-scores-two-years.csv'
SUM_RULE_TOLERANCE = 1e-9
TRAINING_COMMANDS = ('train', 'sweep', 'stability')


def _write_json(path, data):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _read_json(path):
    if not os.path.isfile(path):
        raise UnresolvedReferenceError("Artifact %s does not exist" % path)
    with open(path) as handle:
        return json.load(handle)


@contextlib.contextmanager
def _staging(out):
    """Private directory whose files replace their counterparts under `out` on success"""
    staging = tempfile.mkdtemp(prefix=".stage-", dir=out)
    try:
        yield staging
        for root, _, files in os.walk(staging):
            for name in files:
                source = os.path.join(root, name)
                target = os.path.join(out, os.path.relpath(source, staging))
                os.makedirs(os.path.dirname(target), exist_ok=True)
                os.replace(source, target)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def _staged_files(staging):
    return sorted(os.path.relpath(os.path.join(root, name), staging)
                  for root, _, files in os.walk(staging) for name in files)


def _dataset(out):
    if not os.path.isfile(os.path.join(out, "data", "schema.json")):
        raise UnresolvedReferenceError("No prepared dataset in %s, run the prepare stage first" % out)
    return load_bundle(os.path.join(out, "data"))


def _model_path(out, name):
    return os.path.join(out, "models", "%s.json" % name)


def _load(out, name):
    path = _model_path(out, name)
    if not os.path.isfile(path):
        raise UnresolvedReferenceError("Model %s does not exist, train it first" % path)
    return load_model(path)


def _cell_suffix(cell):
    if cell is None:
        return ""
    return "-" + "_".join(str(value).replace(".", "p") for value in cell)


def _log_to_dict(train_log):
    return {'method': train_log.method, 'restored_iteration': train_log.restored_iteration,
            'entries': [entry._asdict() for entry in train_log.entries]}


def stage_prepare(config, out, staging):
    if config.dataset == 'adult':
        train_path, test_path = (os.path.join(config.data_dir, name) for name in ADULT_FILES)
        ds = load_adult(train_path, test_path, config.seed, config.include_protected)
    elif config.dataset == 'compas':
        ds = load_compas(os.path.join(config.data_dir, COMPAS_FILE), config.seed, config.include_protected)
    else:
        ds = make_synthetic(config.synthetic_rows, config.seed, config.include_protected)
    save_bundle(ds, os.path.join(staging, "data"))
    return {'dataset': ds.name, 'rows': ds.n_rows, 'players': list(ds.players),
            'split': dict((split.value, int(len(ds.rows(split)))) for split in Split)}


def stage_train(config, out, staging):
    ds = _dataset(out)
    cfg = config.train_config()
    base_path = os.path.join(staging, "models", "baseline.json")
    os.makedirs(os.path.dirname(base_path), exist_ok=True)
    train_log = None
    if config.method == 'baseline':
        model, train_log = interventions.train_baseline(ds, config.resolved_hidden, cfg)
        save_model(model, base_path)
    elif config.method == 'adv-fresh':
        model, train_log = interventions.train_adversarial(ds, interventions.Fresh(config.resolved_hidden), cfg)
        save_model(model, os.path.join(staging, "models", "adv-fresh.json"))
    else:
        base = _load(out, 'baseline')
        if config.method == 'adv-perturbed':
            target = interventions.Perturbation(base, config.input_mode(), config.resolved_hidden)
            model, train_log = interventions.train_adversarial(ds, target, cfg)
        elif config.method == 'suppress':
            model, train_log = interventions.suppression_retrain(base, ds, config.suppress_alpha, config.suppress_batches, cfg)
        elif config.method == 'feldman':
            model = interventions.feldman_postprocess(base, ds, config.repair)
        else:
            model = interventions.hardt_postprocess(base, ds, seed=config.weight_seed)
        if isinstance(model, Mlp):
            save_model(model, os.path.join(staging, "models", "%s.json" % config.method))
        else:
            save_model(model, os.path.join(staging, "models", "%s.json" % config.method), base_path)
    if train_log is not None:
        _write_json(os.path.join(staging, "logs", "%s.json" % config.method), _log_to_dict(train_log))
    return {'method': config.method}


def _explained_models(config, out):
    names = ['baseline']
    if config.method != 'baseline':
        names.append(config.method)
    return [(name, _load(out, name)) for name in names if os.path.isfile(_model_path(out, name))]


def _write_report(staging, stem, report):
    shapley.write_report_json(report, os.path.join(staging, "reports", stem + ".json"))
    with open(os.path.join(staging, "reports", stem + ".csv"), "w") as handle:
        handle.write(shapley.report_csv(report))


def stage_explain(config, out, staging):
    ds = _dataset(out)
    cfg = config.estimator_config()
    os.makedirs(os.path.join(staging, "reports"), exist_ok=True)
    models = _explained_models(config, out)
    if not models:
        raise UnresolvedReferenceError("No model to explain in %s" % out)
    written = []
    for kind in config.explain_kinds:
        spec = shapley.value_function_spec(kind, ds, config.explain_split, resolving=config.resolving, drop_empty=True)
        cells = [None]
        if kind == 'eo':
            cells = [key[0] for key in spec.rates.keys]
        elif kind == 'cdp':
            cells = list(spec.rates.keys)
        for cell in cells:
            cell_spec = spec
            if kind == 'eo':
                cell_spec = spec._replace(target_label=cell)
            elif kind == 'cdp':
                cell_spec = spec._replace(cell=cell)
            for name, model in models:
                if isinstance(model, PerturbedModel):
                    explanation = shapley.explain_perturbation(cell_spec, model, ds, config.explain_split, cfg)
                    named = [("perturbation", explanation.delta), (name, explanation.corrected)]
                    if 'baseline' not in dict(models):
                        named.append(("baseline", explanation.base))
                else:
                    named = [(name, shapley.global_shapley(cell_spec, model, ds, config.explain_split, cfg))]
                for label, report in named:
                    stem = "%s-%s%s" % (label, kind, _cell_suffix(report.cell))
                    _write_report(staging, stem, report)
                    written.append(stem)
    return {'reports': sorted(written)}


def stage_evaluate(config, out, staging):
    ds = _dataset(out)
    models = _explained_models(config, out)
    baseline = dict(models).get('baseline')
    for name, model in models:
        results = [
            fairness_metrics.expected_accuracy(model, ds, Split.TEST),
            fairness_metrics.hard_accuracy(model, ds, Split.TEST),
            fairness_metrics.dp_difference(model, ds, Split.TEST),
            fairness_metrics.dp_difference(model, ds, Split.TEST, hard=True),
            fairness_metrics.eo_difference(model, ds, Split.TEST),
            fairness_metrics.eo_difference(model, ds, Split.TEST, hard=True),
            fairness_metrics.eop_difference(model, ds, Split.TEST),
        ]
        if config.resolving:
            results.append(fairness_metrics.cdp_difference(model, ds, Split.TEST, config.resolving))
        if ds.protected_group is not None:
            results.append(fairness_metrics.intervention_gap(model, ds, Split.TEST))
        data = {'model': name, 'metrics': [fairness_metrics.metric_to_dict(result) for result in results]}
        if baseline is not None and name != 'baseline':
            data['agreement_with_baseline'] = fairness_metrics.agreement(model, baseline, ds, Split.TEST)
        _write_json(os.path.join(staging, "metrics", "%s.json" % name), data)
    return {'models': [name for name, _ in models]}


def stage_plot(config, out, staging):
    paths = sorted(glob.glob(os.path.join(out, "reports", "*.json")))
    if not paths:
        raise UnresolvedReferenceError("No reports to plot in %s, run the explain stage first" % out)
    os.makedirs(os.path.join(staging, "plots"), exist_ok=True)
    written = []
    for path in paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        render.write_waterfall(shapley.read_report_json(path), os.path.join(staging, "plots", stem + ".svg"))
        written.append(stem + ".svg")
    return {'plots': written}


def _sum_rule_check(stem, report):
    complete = report.estimator.get('rows_used') == report.estimator.get('rows_available')
    residual = shapley.report_residual(report)
    if not complete:
        return {'check': 'sum-rule', 'report': stem, 'value': residual, 'status': 'skipped'}
    return {'check': 'sum-rule', 'report': stem, 'value': residual,
            'status': 'passed' if abs(residual) < SUM_RULE_TOLERANCE else 'failed'}


def stage_verify(config, out, staging):
    """Invariant checks on stored artifacts"""
    reports = dict((os.path.splitext(os.path.basename(path))[0], shapley.read_report_json(path))
                   for path in sorted(glob.glob(os.path.join(out, "reports", "*.json"))))
    checks = []
    for stem, report in sorted(reports.items()):
        checks.append(_sum_rule_check(stem, report))
        phi_total = float(np.sum(report.phi))
        checks.append({'check': 'total-is-sum', 'report': stem, 'value': report.total - phi_total,
                       'status': 'passed' if abs(report.total - phi_total) < 1e-12 else 'failed'})
    for stem, report in sorted(reports.items()):
        if not stem.startswith("perturbation-"):
            continue
        suffix = stem[len("perturbation-"):]
        corrected = reports.get("adv-perturbed-" + suffix)
        base = reports.get("baseline-" + suffix)
        if corrected is None or base is None:
            continue
        discrepancy = float(np.max(np.abs(np.array(corrected.phi) - np.array(base.phi) - np.array(report.phi))))
        checks.append({'check': 'linearity', 'report': suffix, 'value': discrepancy,
                       'status': 'passed' if discrepancy < 1e-10 else 'failed'})
    if os.path.isfile(_model_path(out, 'adv-perturbed')) and os.path.isfile(_model_path(out, 'baseline')):
        frozen = interventions.parameters_equal(_load(out, 'adv-perturbed').base, _load(out, 'baseline'))
        checks.append({'check': 'frozen-base', 'report': 'adv-perturbed', 'value': None,
                       'status': 'passed' if frozen else 'failed'})
    _write_json(os.path.join(staging, "verify.json"), {'checks': checks})
    failed = [check for check in checks if check['status'] == 'failed']
    for check in failed:
        log.error("Check %s failed on %s: %s" % (check['check'], check['report'], check['value']))
    return {'checks': len(checks), 'failed': len(failed)}


def stage_sweep(config, out, staging):
    ds = _dataset(out)
    base = _load(out, 'baseline')
    cfg = config.train_config()
    runs = [interventions.score_run('baseline', None, config.weight_seed, {}, base, None, ds, config.notion)]
    runs += interventions.lambda_sweep(ds, interventions.Fresh(config.resolved_hidden), cfg, config.sweep_weights)
    runs += interventions.lambda_sweep(ds, interventions.Perturbation(base, config.input_mode(), config.resolved_hidden),
                                       cfg, config.sweep_weights)
    if config.notion == 'dp':
        runs += interventions.repair_sweep(base, ds, notion=config.notion)
    else:
        hardt = interventions.hardt_postprocess(base, ds, seed=config.weight_seed)
        runs.append(interventions.score_run('hardt', None, config.weight_seed, {}, hardt, None, ds, config.notion))
    table = fairness_metrics.threshold_table(runs, config.thresholds, config.notion)
    os.makedirs(os.path.join(staging, "tables"), exist_ok=True)
    with open(os.path.join(staging, "tables", "%s.txt" % config.notion), "w") as handle:
        handle.write(fairness_metrics.render_table_text(table))
    with open(os.path.join(staging, "tables", "%s.csv" % config.notion), "w") as handle:
        handle.write(fairness_metrics.render_table_csv(table))
    _write_json(os.path.join(staging, "tables", "%s-runs.json" % config.notion),
                [{'method': run.method, 'weight': run.weight, 'seed': run.seed, 'accuracy': run.accuracy,
                  'fairness': run.fairness} for run in runs])
    return {'runs': len(runs), 'methods': list(table.methods)}


def stage_stability(config, out, staging):
    """Fresh and perturbation-target adversarial runs over the stability grid,
    binned by fairness per method"""
    ds = _dataset(out)
    base = _load(out, 'baseline')
    cfg = config.train_config()
    runs = interventions.stability_grid(ds, base, config.stability_grid(), config.stability_seeds, cfg, config.processes)
    methods = []
    for run in runs:
        if run.method not in methods:
            methods.append(run.method)
    bins = dict((method, fairness_metrics.fairness_bins([run for run in runs if run.method == method])) for method in methods)
    moved = [index for index, run in enumerate(runs)
             if run.method == 'adv-perturbed' and not interventions.parameters_equal(run.predictor.base, base)]
    stem = os.path.join(staging, "tables", "stability-%s" % config.notion)
    os.makedirs(os.path.dirname(stem), exist_ok=True)
    with open(stem + "-bins.csv", "w") as handle:
        handle.write(fairness_metrics.render_bins_csv(bins))
    _write_json(stem + "-bins.json", dict((method, [b._asdict() for b in method_bins]) for method, method_bins in bins.items()))
    _write_json(stem + "-runs.json", [{'method': run.method, 'seed': run.seed, 'settings': run.settings,
                                       'accuracy': run.accuracy, 'fairness': run.fairness} for run in runs])
    if moved:
        log.error("Base parameters of %s perturbed runs changed" % len(moved))
    return {'runs': len(runs), 'methods': methods, 'checks': 1, 'failed': int(bool(moved))}


STAGES = {
    'prepare': stage_prepare,
    'train': stage_train,
    'explain': stage_explain,
    'evaluate': stage_evaluate,
    'plot': stage_plot,
    'verify': stage_verify,
    'sweep': stage_sweep,
    'stability': stage_stability,
}


def run(config):
    """Execute the configured stages in pipeline order and return the output directory"""
    out = os.path.abspath(config.out)
    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, "manifest.json")
    manifest = _read_json(manifest_path) if os.path.isfile(manifest_path) else {'stages': {}}
    for stage in STAGE_ORDER:
        if stage not in config.stages:
            continue
        log.info("Running stage %s" % stage)
        try:
            with _staging(out) as staging:
                summary = STAGES[stage](config, out, staging)
                summary['files'] = _staged_files(staging)
        except FairshapError as e:
            raise StageError(stage, e)
        manifest['stages'][stage] = summary
        if summary.get('failed'):
            _write_json(manifest_path, manifest)
            raise StageError(stage, "%s of %s checks failed" % (summary['failed'], summary['checks']))
    manifest.update({'toolkit': "fairshap", 'version': __version__, 'config': config.model_dump(mode='json'),
                     'config_hash': config.config_hash()})
    _write_json(manifest_path, manifest)
    return out


def _parse_args(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--dataset", choices=['adult', 'compas', 'synthetic'])
    common.add_argument("--data-dir")
    common.add_argument("--seed", type=int, help="split seed for data prepare, training seed for train, sweep and stability "
                        "unless --weight-seed is given, estimator seed for explain")
    common.add_argument("--weight-seed", type=int)
    common.add_argument("--exclude-protected", action="store_true", help="drop the protected group from the inputs")
    common.add_argument("--method", choices=['baseline', 'adv-fresh', 'adv-perturbed', 'suppress', 'feldman', 'hardt'])
    common.add_argument("--notion", choices=['dp', 'eo'])
    common.add_argument("--iterations", type=int)
    common.add_argument("--adversary-weight", type=float)
    common.add_argument("--no-aux-features", action="store_true", help="perturbation network ignores x")
    common.add_argument("--no-aux-protected", action="store_true", help="perturbation network ignores a")
    common.add_argument("--explain-kind", action="append", choices=['accuracy', 'dp', 'eo', 'cdp'])
    common.add_argument("--resolving", action="append", help="resolving player for cdp, repeatable")
    common.add_argument("--estimator", choices=['exact', 'sampled'])
    common.add_argument("--permutations", type=int)
    common.add_argument("--background", type=int)
    common.add_argument("--processes", type=int, help="worker processes for the stability grid")
    common.add_argument("--out")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="fairshap", description="Shapley explanations of accuracy and group fairness")
    parser.add_argument("--version", action="version", version="fairshap %s" % __version__)
    commands = parser.add_subparsers(dest="command", required=True)
    data = commands.add_parser("data", help="dataset preparation")
    data_commands = data.add_subparsers(dest="data_command", required=True)
    data_commands.add_parser("prepare", parents=[common], help="load, clean, encode and split a dataset")
    for name, text in (('train', "train or post-process a model"), ('explain', "write Shapley reports"),
                       ('evaluate', "write test metrics"), ('plot', "render waterfalls of stored reports"),
                       ('verify', "check invariants of stored artifacts"), ('sweep', "adversary weight sweep and threshold table"),
                       ('stability', "adversarial runs over a settings grid, binned by fairness"),
                       ('run', "run the stages listed in the config")):
        commands.add_parser(name, parents=[common], help=text)
    return parser.parse_args(argv)


def _config_from_args(args):
    overrides = {
        'dataset': args.dataset,
        'data_dir': args.data_dir,
        'seed': args.seed,
        'weight_seed': args.weight_seed,
        'method': args.method,
        'notion': args.notion,
        'iterations': args.iterations,
        'adversary_weight': args.adversary_weight,
        'estimator': args.estimator,
        'permutations': args.permutations,
        'background': args.background,
        'processes': args.processes,
        'out': args.out,
        'explain_kinds': tuple(args.explain_kind) if args.explain_kind else None,
        'resolving': tuple(args.resolving) if args.resolving else None,
    }
    if args.command in TRAINING_COMMANDS and args.seed is not None:
        # the split seed is fixed in the prepared bundle
        overrides['seed'] = None
        if args.weight_seed is None:
            overrides['weight_seed'] = args.seed
    if args.exclude_protected:
        overrides['include_protected'] = False
    if args.no_aux_features:
        overrides['aux_features'] = False
    if args.no_aux_protected:
        overrides['aux_protected'] = False
    if args.command == 'data':
        overrides['stages'] = ('prepare',)
    elif args.command != 'run':
        overrides['stages'] = (args.command,)
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig().with_overrides(**overrides)


def main(argv=None):
    args = _parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = _config_from_args(args)
        out = run(config)
    except (FairshapError, ValidationError) as e:
        print("fairshap: error: %s" % e, file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
