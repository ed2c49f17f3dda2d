"""Command-line entry point

    pyspml regime gen --config gen.json --out data/ --seed 7
    pyspml regime apply --manifest data/train.json --regime Geo --out data/geo.json
    pyspml regime stats --manifest data/geo.json
    pyspml train --config exp.json --out runs/exp
    pyspml eval --run runs/exp
    pyspml gradcheck --all --trials 100
    pyspml sweep --config exp.json --out runs/sweep
    pyspml report runs/* --out report.csv
"""
import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from .conf import settings
from .evaluation import evaluate, write_eval_artifacts
from .exceptions import (
    ConfigValidationError,
    LossConfigurationError,
    ManifestValidationError,
    SPMLError,
    TypeValidationError,
)
from .labelspace import load_manifest, save_manifest, split_dataset
from .losses import LossKind, LossSpec
from .model import ModelParams
from .regimes import (
    GeneratorConfig,
    PriorSimConfig,
    RegimeKind,
    RegimeStats,
    apply_regime,
    flatten,
    gen_synthetic_assets,
    make_target_only,
    regime_stats,
    simulate_context_priors,
)
from .schemas import GeneratorSchema, PriorSimSchema, Schemas, describe
from .trainer import (
    LR_GRID,
    TrainConfig,
    gradcheck,
    lr_sweep,
    run_experiment,
    sweep,
)
from .utils import merge, parse_overrides, read_json, write_json
from .version import version

logger = logging.getLogger(__name__)

USAGE_ERRORS = (
    ConfigValidationError,
    TypeValidationError,
    ManifestValidationError,
    LossConfigurationError,
)
CONTEXT_PRIOR = 'ContextPrior'
REPORT_COLUMNS = ('loss_kind', 'regime', 'reg_kind', 'n', 'mean_map', 'std_map')


class UsageError(Exception):
    """Exception raised for an invalid combination of flags"""
    pass


def configure_logging(level=None):
    level = (level or settings.LOG_LEVEL or 'INFO').upper()
    root = logging.getLogger()
    if root.handlers:
        root.setLevel(level)
        return
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(name)s %(message)s',
        stream=sys.stderr,
    )


def _overrides(pairs):
    try:
        return parse_overrides(pairs)
    except ValueError as e:
        raise UsageError(str(e))


def load_config(path, overrides=None, seed=None):
    """Experiment config from a JSON file, --set overrides and --seed"""
    config = read_json(path) if path else {}
    if not isinstance(config, dict):
        raise ConfigValidationError(f'{path}: expecting a JSON object')
    merge(_overrides(overrides), config)
    if seed is not None:
        for section in ('model', 'reg', 'train'):
            config.setdefault(section, {})['seed'] = seed
    return config


def seed_value(value):
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f'invalid seed "{value}" (expected an integer)')
    if seed < 0:
        raise argparse.ArgumentTypeError(f'invalid seed {seed} (must be >= 0)')
    return seed


def regime_kind(value):
    if value.lower() == CONTEXT_PRIOR.lower():
        return CONTEXT_PRIOR
    for kind in RegimeKind:
        if kind.value.lower() == value.lower().replace('-', '').replace('_', ''):
            return kind
    choices = ', '.join([k.value for k in RegimeKind] + [CONTEXT_PRIOR])
    raise argparse.ArgumentTypeError(f'invalid regime "{value}" (choose from {choices})')


def cmd_regime_gen(args):
    values = read_json(args.config) if args.config else {}
    values = values.get('generator', values)
    merge(_overrides(args.set), values)
    if args.seed is not None:
        values['seed'] = args.seed
    cfg = GeneratorConfig.from_config(values)
    dataset, truth = gen_synthetic_assets(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_manifest(os.path.join(args.out, 'full.json'), dataset)
    for part in split_dataset(dataset, cfg.split, seed=cfg.seed):
        save_manifest(os.path.join(args.out, f'{part.meta.split}.json'), part)
        logger.info(f'split={part.meta.split} assets={len(part.assets)} clips={len(part)}')
    truth_doc = dict(truth.to_document(), generator=cfg.as_dict())
    write_json(os.path.join(args.out, 'truth.json'), truth_doc)
    return 0


def cmd_regime_apply(args):
    dataset = load_manifest(args.manifest)
    if args.flat:
        dataset = flatten(dataset)
    if args.regime == CONTEXT_PRIOR:
        if not args.full:
            raise UsageError('--regime ContextPrior needs --full (manifest with hidden labels)')
        full = load_manifest(args.full)
        values = read_json(args.config) if args.config else {}
        values = values.get('prior', values)
        merge(_overrides(args.set), values)
        if args.seed is not None:
            values['seed'] = args.seed
        cfg = PriorSimConfig.from_config(values)
        flat = flatten(dataset) if not dataset.is_flat else dataset
        result = simulate_context_priors(make_target_only(flat, seed=cfg.seed), full, cfg)
    else:
        result = apply_regime(dataset, args.regime, seed=args.seed or 0)
    stats = regime_stats(result)
    logger.info(
        f'regime={result.meta.regime} examples={stats.n_examples} '
        f'mean_pos={stats.mean_pos:.3f} mean_neg={stats.mean_neg:.3f} mean_unk={stats.mean_unk:.3f}'
    )
    out = os.path.dirname(args.out)
    if out:
        os.makedirs(out, exist_ok=True)
    save_manifest(args.out, result)
    return 0


def cmd_regime_stats(args):
    rows = []
    for path in args.manifest:
        dataset = load_manifest(path)
        stats = regime_stats(dataset)
        rows.append(stats.as_row(dataset.meta.split, dataset.meta.regime or RegimeKind.FULL.value))
    if args.out:
        with open(args.out, 'w', newline='') as f:
            _write_rows(f, RegimeStats.columns, rows)
    else:
        _write_rows(sys.stdout, RegimeStats.columns, rows)
    return 0


def _write_rows(f, columns, rows):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow(row)


def cmd_train(args):
    config = load_config(args.config, args.set, args.seed)
    record = run_experiment(TrainConfig.from_config(config, require_data=True), args.out)
    if record.test is not None:
        print(f"test_map={record.test['map']}")
    return 0


def cmd_eval(args):
    config = read_json(os.path.join(args.run, 'config.json'))
    path = args.manifest or (config.get('data') or {}).get('test')
    if not path:
        raise UsageError('no test manifest: pass --manifest or set data.test in the run config')
    dataset = load_manifest(path)
    params = ModelParams.from_document(read_json(os.path.join(args.run, 'checkpoint.json')))
    report = evaluate(params, dataset, filter_fully_labeled=not args.no_filter, histogram_bins=args.bins)
    write_eval_artifacts(report, args.run)
    print(f'map={report.map} examples={report.n_examples_used}')
    return 0


def cmd_gradcheck(args):
    if args.all:
        checks = [(kind.value, None) for kind in LossKind]
        checks += [(LossKind.AN.value, 'rp'), (LossKind.AN.value, 're')]
    else:
        checks = [(args.loss, args.reg)]
    rows = []
    failed = False
    for kind, reg in checks:
        report = gradcheck(LossSpec(kind=kind), trials=args.trials, seed=args.seed or 0, reg=reg)
        failed = failed or not report.passed
        rows.append([
            report.kind,
            report.reg,
            report.trials,
            f'{report.max_rel_err:.3e}',
            'ok' if report.passed else f'FAIL({len(report.failures)})',
        ])
    _write_rows(sys.stdout, ('kind', 'reg', 'trials', 'max_rel_err', 'status'), rows)
    return 1 if failed else 0


def cmd_sweep(args):
    config = load_config(args.config, args.set, args.seed)
    cfg = TrainConfig.from_config(config, require_data=True)
    if not cfg.data.get('val'):
        raise ConfigValidationError('data.val: required for sweep')
    train_set = load_manifest(cfg.data['train'])
    val_set = load_manifest(cfg.data['val'])
    grid = args.grid or list(LR_GRID)
    configs = lr_sweep(config, grid)
    result = sweep(configs, train_set, val_set, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    rows = [
        [i, repr(lr), '' if math.isinf(score) else repr(score)]
        for i, (lr, score) in enumerate(zip(grid, result.scores))
    ]
    with open(os.path.join(args.out, 'sweep.csv'), 'w', newline='') as f:
        _write_rows(f, ('index', 'base_lr', 'val_map'), rows)
    write_json(os.path.join(args.out, 'best_config.json'), result.best_config, indent=2)
    print(f'best={result.best_index} base_lr={grid[result.best_index]}')
    return 0


def aggregate_runs(run_dirs):
    """Mean and sample std of test mAP per (loss kind, regime, reg kind)"""
    groups = {}
    for run in run_dirs:
        path = os.path.join(run, 'record.json')
        try:
            record = read_json(path)
            key = (record['loss_kind'], record['regime'] or '', record['reg_kind'])
            value = float(record['test_map'])
        except (OSError, ValueError, KeyError, TypeError) as e:
            logger.warning(f'run skipped path={run} reason="{e}"')
            continue
        if math.isnan(value):
            logger.warning(f'run skipped path={run} reason="undefined test map"')
            continue
        groups.setdefault(key, []).append(value)
    rows = []
    for key in sorted(groups):
        values = np.array(groups[key])
        std = '' if len(values) < 2 else repr(float(np.std(values, ddof=1)))
        rows.append(list(key) + [len(values), repr(float(values.mean())), std])
    return rows


def cmd_report(args):
    rows = aggregate_runs(args.runs)
    if args.out:
        with open(args.out, 'w', newline='') as f:
            _write_rows(f, REPORT_COLUMNS, rows)
    else:
        _write_rows(sys.stdout, REPORT_COLUMNS, rows)
    return 0


def _experiment_help():
    return '\n\n'.join(describe(schema) for schema in Schemas.values())


def _add_common(parser, default=argparse.SUPPRESS):
    parser.add_argument('--log-level', default=default, help='logging level (default from settings)')


def build_parser():
    formatter = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog='pyspml',
        description='Single-positive multi-label learning experiments',
        formatter_class=formatter,
    )
    parser.add_argument('--version', action='version', version=f'pyspml {version}')
    _add_common(parser, default=None)
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    regime = commands.add_parser('regime', help='generate datasets and build label regimes')
    regime_commands = regime.add_subparsers(dest='regime_command', metavar='action')
    regime_commands.required = True

    gen = regime_commands.add_parser(
        'gen',
        help='generate a synthetic asset benchmark',
        epilog=describe(GeneratorSchema),
        formatter_class=formatter,
    )
    gen.add_argument('--config', help='generator config (JSON)')
    gen.add_argument('--out', required=True, help='output directory')
    gen.add_argument('--seed', type=seed_value, default=None)
    gen.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    _add_common(gen)
    gen.set_defaults(handler=cmd_regime_gen)

    apply = regime_commands.add_parser(
        'apply',
        help='apply a label regime to a manifest',
        epilog=describe(PriorSimSchema),
        formatter_class=formatter,
    )
    apply.add_argument('--manifest', required=True)
    apply.add_argument('--regime', required=True, type=regime_kind)
    apply.add_argument('--out', required=True, help='output manifest')
    apply.add_argument('--seed', type=seed_value, default=None)
    apply.add_argument('--flat', action='store_true', help='drop asset structure first')
    apply.add_argument('--full', help='fully labelled manifest (ContextPrior only)')
    apply.add_argument('--config', help='prior simulation config (ContextPrior only)')
    apply.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    _add_common(apply)
    apply.set_defaults(handler=cmd_regime_apply)

    stats = regime_commands.add_parser('stats', help='label statistics of manifests')
    stats.add_argument('--manifest', required=True, nargs='+')
    stats.add_argument('--out', help='CSV path (default stdout)')
    _add_common(stats)
    stats.set_defaults(handler=cmd_regime_stats)

    train = commands.add_parser(
        'train',
        help='train and evaluate one experiment',
        epilog=_experiment_help(),
        formatter_class=formatter,
    )
    train.add_argument('--config', required=True, help='experiment config (JSON)')
    train.add_argument('--out', required=True, help='run directory')
    train.add_argument('--seed', type=seed_value, default=None, help='seed for model, reg and train')
    train.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    _add_common(train)
    train.set_defaults(handler=cmd_train)

    evaluate_ = commands.add_parser('eval', help="re-evaluate a run's checkpoint")
    evaluate_.add_argument('--run', required=True, help='run directory')
    evaluate_.add_argument('--manifest', help='test manifest (default data.test of the run)')
    evaluate_.add_argument('--no-filter', action='store_true', help='keep partially labelled examples')
    evaluate_.add_argument('--bins', type=int, default=20, help='score histogram bins')
    _add_common(evaluate_)
    evaluate_.set_defaults(handler=cmd_eval)

    check = commands.add_parser('gradcheck', help='finite-difference gradient checks')
    which = check.add_mutually_exclusive_group(required=True)
    which.add_argument('--all', action='store_true', help='every loss kind plus both regularizers')
    which.add_argument('--loss', choices=[k.value for k in LossKind])
    check.add_argument('--reg', choices=['rp', 're'], default=None)
    check.add_argument('--trials', type=int, default=100)
    check.add_argument('--seed', type=seed_value, default=None)
    _add_common(check)
    check.set_defaults(handler=cmd_gradcheck)

    sweep_ = commands.add_parser(
        'sweep',
        help='learning-rate sweep selected by validation mAP',
        epilog=_experiment_help(),
        formatter_class=formatter,
    )
    sweep_.add_argument('--config', required=True)
    sweep_.add_argument('--out', required=True)
    sweep_.add_argument('--grid', type=float, nargs='+', default=None, help='learning rates')
    sweep_.add_argument('--workers', type=int, default=1)
    sweep_.add_argument('--seed', type=seed_value, default=None)
    sweep_.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    _add_common(sweep_)
    sweep_.set_defaults(handler=cmd_sweep)

    report = commands.add_parser('report', help='aggregate test mAP over run directories')
    report.add_argument('runs', nargs='+', help='run directories')
    report.add_argument('--out', help='CSV path (default stdout)')
    _add_common(report)
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv=None):
    """Run one command; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except FileNotFoundError as e:
        print(f'pyspml: file not found: {e.filename}', file=sys.stderr)
        return 1
    except (UsageError, *USAGE_ERRORS) as e:
        print(f'pyspml: {e}', file=sys.stderr)
        return 2
    except SPMLError as e:
        print(f'pyspml: {e.__class__.__name__}: {e}', file=sys.stderr)
        return 1
