"""
Command line front end.

``eqsandwich fit|diagnose|bootstrap|simulate --config run.json --out dir``

Exit codes: 0 on success, 1 when estimation fails numerically, 2 for usage,
config and input errors. Errors are printed as ``<ErrorType>: <message>``.
"""
import argparse
import os
import sys
from pathlib import Path

import numpy as np

from eqsandwich import __version__, log
from eqsandwich.bootstrap import percentile_ci
from eqsandwich.config import load_config
from eqsandwich.exceptions import ConfigError, EqsandwichError
from eqsandwich.io import (bootstrap_table, diagnostics_table, fit_table, read_dataset,
                           write_json, write_table)
from eqsandwich.simlab import generate, run_replications

__all__ = ['main', 'build_parser', 'resolve_threads']

THREADS_ENV = 'EQSW_THREADS'


def build_parser():
    parser = argparse.ArgumentParser(
        prog='eqsandwich',
        description='Two-stage M-estimation with nuisance-corrected sandwich variances.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    helps = {'fit': 'fit an estimator and report every variance estimate',
             'diagnose': 'check the score identities on a fitted model',
             'bootstrap': 'percentile bootstrap confidence intervals',
             'simulate': 'Monte Carlo replications of a builtin scenario'}
    for name, text in helps.items():
        command = commands.add_parser(name, help=text, description=text)
        command.add_argument('--config', required=True, help='JSON run config')
        command.add_argument('--out', default='.', help='output directory (default: .)')
        command.add_argument('--seed', type=int, default=0,
                             help='seed for simulated data and resampling (default: 0)')
        command.add_argument('--threads', type=int, default=None,
                             help=f'worker threads (default: ${THREADS_ENV} or all cores)')
        command.add_argument('--quiet', action='store_true', help='only log warnings')
        if name == 'bootstrap':
            command.add_argument('--b', type=int, default=None,
                                 help='number of replicates (default: from config)')
            command.add_argument('--level', type=float, default=None,
                                 help='nominal coverage (default: from config)')
    return parser


def resolve_threads(threads=None):
    """
    ``--threads``, else ``$EQSW_THREADS``, else the number of cores.
    """
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return os.cpu_count() or 1
        try:
            threads = int(env)
        except ValueError as err:
            raise ConfigError(f'{THREADS_ENV} must be an integer, got {env!r}.') from err
    if threads < 1:
        raise ConfigError(f'Thread count must be positive, got {threads}.')
    return threads


def _load_data(config, seed):
    if config.data is not None:
        return read_dataset(config.data, config.resolved_format)
    return generate(config.scenario_config(seed))


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_table(table):
    print('\n'.join(table.pformat(max_lines=-1, max_width=-1)))


def cmd_fit(args):
    config = load_config(args.config, 'fit')
    estimator = config.estimator.build(config.solver)
    data = _load_data(config, args.seed)
    fit = estimator.fit(data)

    doc = fit.to_dict(config.level)
    doc['intervals'] = {name: interval for name, interval in doc['intervals'].items()
                        if name in config.variance}
    doc['n'] = len(data)
    out = _out_dir(args)
    write_json(out / 'fit.json', doc)
    table = fit_table(fit, config.level)
    table = table[np.array([name in config.variance for name in table['variance']], dtype=bool)]
    table.write(str(out / 'fit.txt'), format='ascii.fixed_width_two_line', overwrite=True)
    if not args.quiet:
        _print_table(table)
    return 0


def cmd_diagnose(args):
    config = load_config(args.config, 'diagnose')
    estimator = config.estimator.build(config.solver)
    fit = estimator.fit(_load_data(config, args.seed))

    diagnostics = fit.report.diagnostics
    write_json(_out_dir(args) / 'diagnostics.json',
               {'estimator': fit.estimator, 'n': int(fit.moments.n),
                'diagnostics': diagnostics.to_dict()})
    if not args.quiet:
        _print_table(diagnostics_table(diagnostics))
    return 0


def cmd_bootstrap(args):
    config = load_config(args.config, 'bootstrap')
    b = args.b if args.b is not None else config.b
    level = args.level if args.level is not None else config.level
    if not 0 < level < 1:
        raise ConfigError(f'level must be in (0, 1), got {level}.')
    estimator = config.estimator.build(config.solver)
    data = _load_data(config, args.seed)

    names = estimator.parameter_names(estimator.function_set(data))
    try:
        result = percentile_ci(estimator, data, B=b, level=level, seed=args.seed,
                               threads=resolve_threads(args.threads))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    doc = result.to_dict()
    doc.update({'estimator': estimator.name, 'parameter_names': list(names), 'b': b,
                'seed': args.seed})
    out = _out_dir(args)
    write_json(out / 'bootstrap.json', doc)
    write_table(out / 'bootstrap.csv', bootstrap_table(result, names))
    if not args.quiet:
        for j, name in enumerate(names):
            print(f'{name}: {result.estimate[j]:.6g} '
                  f'[{result.ci_lower[j]:.6g}, {result.ci_upper[j]:.6g}]')
    return 0


def cmd_simulate(args):
    config = load_config(args.config, 'simulate')
    scenario = config.scenario_config(args.seed)
    estimator = config.estimator.build(config.solver)
    results = run_replications(scenario, estimator, config.replications, master_seed=args.seed,
                               threads=resolve_threads(args.threads),
                               paired_known_theta=config.paired_known_theta)
    if config.paired_known_theta:
        result, known = results
    else:
        result, known = results, None

    doc = result.to_dict(config.level)
    doc['scenario_config'] = scenario.to_dict()
    doc['master_seed'] = args.seed
    if known is not None:
        doc['known_theta'] = known.to_dict(config.level)
    out = _out_dir(args)
    write_json(out / 'simulate.json', doc)
    write_table(out / 'replications.csv', result.estimates_table())
    if not args.quiet:
        for name, values in doc['coverage'].items():
            print(f'{name} coverage: {values}')
    return 0


COMMANDS = {'fit': cmd_fit, 'diagnose': cmd_diagnose, 'bootstrap': cmd_bootstrap,
            'simulate': cmd_simulate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = log.level
    if args.quiet:
        log.setLevel('WARNING')
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f'{type(err).__name__}: {err}', file=sys.stderr)
        return 2
    except EqsandwichError as err:
        print(f'{type(err).__name__}: {err}', file=sys.stderr)
        return 1
    except (KeyError, OSError, ValueError) as err:
        print(f'{type(err).__name__}: {err}', file=sys.stderr)
        return 2
    finally:
        log.setLevel(level)


if __name__ == '__main__':
    sys.exit(main())
