#! /usr/bin/env python
"""
experiment.py
Experiment harness and command line. An experiment runs every requested
scheme, ablation and baseline for every datacenter count and seed on the
same seeded traces, then writes per-epoch metrics, run summaries, the
Pareto archives, a hypervolume table, seed-aggregated metrics and a YAML
manifest.
"""

import argparse
import logging
import os
import platform
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import pandas as pd
import scipy
import yaml
from scipy import stats

from greenroute import __version__
from greenroute.baselines import BASELINES, run_baseline
from greenroute.core import SCHEMES, ScenarioError, load_scenario
from greenroute.game import AblationFlags, GameConfig, run_scheduler
from greenroute.initialize import standard_scenario
from greenroute.pareto import normalized_hypervolume
from greenroute.parallel import parallel_process
from greenroute.sim import CSV_COLUMNS
from greenroute.trace import trace_from_spec
from greenroute.utils import METRIC_NAMES, return_metrics_filename, \
    return_pareto_filename

logger = logging.getLogger(__name__)

SCHEDULER = 'scheduler'
LABEL_COLUMNS = ('framework', 'scheme', 'ablation', 'n_datacenters', 'seed')


@dataclass(frozen=True)
class ExperimentConfig:
    scenario_file: str = None
    schemes: tuple = ('balanced',)
    baselines: tuple = ()
    datacenters: tuple = ()
    epochs: int = None
    seeds: int = 1
    ablations: tuple = ()
    trace: str = 'synthetic:diurnal'
    base_volume: int = 10000
    warmup_epochs: int = None
    out_dir: str = 'results'
    name: str = 'experiment'
    n_jobs: int = 1
    progress: bool = True

    def __post_init__(self):
        for scheme in self.schemes:
            if scheme not in SCHEMES:
                raise ValueError('unknown scheme %r, expected one of %s' %
                                 (scheme, sorted(SCHEMES)))
        for kind in self.baselines:
            if kind not in BASELINES:
                raise ValueError('unknown baseline %r, expected one of %s' % (kind, BASELINES))
        for names in self.ablations:
            AblationFlags.from_names(names.split('+'))
        if self.seeds < 1:
            raise ValueError('seeds must be >= 1')


@dataclass(eq=False)
class ExperimentResult:
    runs: list
    metrics: pd.DataFrame
    summary: pd.DataFrame
    pareto: pd.DataFrame
    phv: pd.DataFrame
    aggregates: pd.DataFrame
    files: dict = field(default_factory=dict)


################################
#                              #
#  Jobs                        #
#                              #
################################

def _run_job(job):
    if job['framework'] == SCHEDULER:
        return run_scheduler(job['scenario'], job['scheme'], job['trace'], job['seed'],
                             flags=job['flags'], config=job['game_config'],
                             epochs=job['epochs'])
    game_config = job['game_config']
    return run_baseline(job['scenario'], job['framework'], job['trace'], job['seed'],
                        warmup_epochs=game_config.warmup_epochs,
                        predictor_alpha=game_config.predictor_alpha,
                        predictor_window=game_config.predictor_window,
                        epochs=job['epochs'])


def _scenario(config):
    n_max = max(config.datacenters) if config.datacenters else 8
    if config.scenario_file is None:
        epochs = config.epochs or 96
        return standard_scenario(n_datacenters=n_max, epochs=epochs)
    scenario = load_scenario(config.scenario_file)
    if config.datacenters and n_max > scenario.n_datacenters:
        raise ScenarioError(['%s has %i datacenters, %i requested' %
                             (config.scenario_file, scenario.n_datacenters, n_max)])
    return scenario


def build_jobs(config, scenario):
    """One job per (datacenter count, seed, framework/scheme/ablation)."""
    epochs = config.epochs or scenario.epochs
    game_config = GameConfig.from_dict(scenario.scheduler)
    if config.warmup_epochs is not None:
        game_config = replace(game_config, warmup_epochs=config.warmup_epochs)

    flag_sets = [AblationFlags()] + [AblationFlags.from_names(a.split('+'))
                                     for a in config.ablations]
    counts = config.datacenters or (scenario.n_datacenters,)
    jobs = []
    for seed in range(config.seeds):
        trace = trace_from_spec(config.trace, scenario, game_config.warmup_epochs + epochs,
                                seed=seed, base_volume=config.base_volume)
        for n in counts:
            sub = scenario if n == scenario.n_datacenters else scenario.subset(n)
            common = {'scenario': sub, 'trace': trace, 'seed': seed, 'epochs': epochs,
                      'game_config': game_config}
            for flags in flag_sets:
                for scheme in config.schemes:
                    jobs.append(dict(common, framework=SCHEDULER, scheme=scheme, flags=flags))
            for kind in config.baselines:
                jobs.append(dict(common, framework=kind, scheme='-', flags=None))
    return jobs


################################
#                              #
#  Tables                      #
#                              #
################################

def confidence_interval(values, level=0.95):
    """(mean, half-width of the t interval); the half-width is 0 for one value."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, 0.
    sem = values.std(ddof=1) / np.sqrt(len(values))
    return mean, float(stats.t.ppf(0.5 + level / 2., len(values) - 1) * sem)


def phv_table(summary):
    """
    Hypervolume per (framework, ablation, datacenter count) of the run
    totals pooled over schemes and seeds, all normalized by the worst
    totals of the whole experiment. Per-seed fronts give the interval and
    ablations are also reported relative to the full configuration.
    """
    totals = summary[list(METRIC_NAMES)].to_numpy(dtype=float)
    reference = np.maximum(totals.max(axis=0), 1e-12)
    rows = []
    for (framework, ablation, n), group in summary.groupby(
            ['framework', 'ablation', 'n_datacenters'], sort=True):
        points = group[list(METRIC_NAMES)].to_numpy(dtype=float)
        per_seed = [normalized_hypervolume(g[list(METRIC_NAMES)].to_numpy(dtype=float),
                                           reference)
                    for _, g in group.groupby('seed', sort=True)]
        mean, ci = confidence_interval(per_seed)
        rows.append({'framework': framework, 'ablation': ablation, 'n_datacenters': n,
                     'phv': normalized_hypervolume(points, reference),
                     'phv_seed_mean': mean, 'phv_seed_ci': ci, 'n_points': len(points)})
    table = pd.DataFrame(rows)
    if len(table):
        full = table[(table.framework == SCHEDULER) & (table.ablation == 'full')]
        full = dict(zip(full.n_datacenters, full.phv))
        table['phv_vs_full'] = [row.phv / full[row.n_datacenters]
                                if row.framework == SCHEDULER and row.n_datacenters in full
                                and full[row.n_datacenters] > 0
                                else np.nan for row in table.itertuples()]
    return table


def aggregate_table(summary):
    """Seed mean and 95% interval of every metric total per configuration."""
    rows = []
    keys = ['framework', 'scheme', 'ablation', 'n_datacenters']
    for key, group in summary.groupby(keys, sort=True):
        row = dict(zip(keys, key))
        row['n_seeds'] = len(group)
        for name in list(METRIC_NAMES) + ['sla_violations']:
            row[name], row[name + '_ci'] = confidence_interval(group[name])
        rows.append(row)
    return pd.DataFrame(rows)


def _save(df, filename):
    df.to_csv(filename, index=False)
    print('---- Saved: %s' % filename)
    return filename


def write_outputs(config, result, scenario):
    os.makedirs(config.out_dir, exist_ok=True)
    out, name = config.out_dir, config.name
    files = {
        'metrics': _save(result.metrics, return_metrics_filename(out, name)),
        'summary': _save(result.summary, os.path.join(out, '%s.summary.csv' % name)),
        'pareto': _save(result.pareto, return_pareto_filename(out, name)),
        'phv': _save(result.phv, os.path.join(out, '%s.phv.csv' % name)),
        'aggregates': _save(result.aggregates, os.path.join(out, '%s.aggregates.csv' % name)),
    }
    manifest = {'config': {k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(config).items()},
                'scenario': repr(scenario),
                'scheduler': asdict(GameConfig.from_dict(scenario.scheduler)),
                'versions': {'greenroute': __version__, 'numpy': np.__version__,
                             'scipy': scipy.__version__, 'pandas': pd.__version__,
                             'python': platform.python_version()},
                'outputs': dict(files)}
    files['manifest'] = os.path.join(out, '%s.manifest.yaml' % name)
    with open(files['manifest'], 'w') as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    print('---- Saved: %s' % files['manifest'])
    return files


def run_experiment(config, scenario=None):
    """
    Runs every job of the experiment, in parallel when n_jobs > 1, and
    writes the tables to config.out_dir unless it is None.
    """
    scenario = scenario or _scenario(config)
    jobs = build_jobs(config, scenario)
    logger.info('%i runs on %r', len(jobs), scenario)
    runs = parallel_process(jobs, _run_job, n_jobs=config.n_jobs, progress=config.progress)

    summary = pd.DataFrame([run.summary() for run in runs])
    result = ExperimentResult(
        runs=runs,
        metrics=pd.DataFrame([row for run in runs for row in run.rows],
                             columns=list(LABEL_COLUMNS + CSV_COLUMNS)),
        summary=summary,
        pareto=pd.DataFrame([record for run in runs for record in run.archive.to_records()]),
        phv=phv_table(summary),
        aggregates=aggregate_table(summary))
    if config.out_dir is not None:
        result.files = write_outputs(config, result, scenario)
    return result


################################
#                              #
#  Command Line                #
#                              #
################################

def _split(value):
    return [v for v in value.split(',') if v] if value else []


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description='Run scheduling experiments.')
    parser.add_argument('--config', type=str, default=None,
                        help='Scenario YAML file. Default is the standard scenario.')
    parser.add_argument('--scheme', type=str, default='balanced',
                        help='Comma-separated schemes from %s, or all.' % sorted(SCHEMES))
    parser.add_argument('--baselines', type=str, default='',
                        help='Comma-separated baselines from %s, or all.' % (BASELINES,))
    parser.add_argument('--datacenters', type=str, default='',
                        help='Comma-separated datacenter counts, e.g. 4,6,8,12.')
    parser.add_argument('--epochs', type=int, default=None)
    parser.add_argument('--seeds', type=int, default=1)
    parser.add_argument('--ablate', type=str, default='',
                        help='Comma-separated ablations, each a +-joined set of flags, '
                             'or all for every single flag.')
    parser.add_argument('--trace', type=str, default='synthetic:diurnal',
                        help='synthetic:PATTERN or csv:PATH.')
    parser.add_argument('--volume', type=int, default=10000,
                        help='Mean requests per epoch of synthetic traces.')
    parser.add_argument('--warmup', type=int, default=None,
                        help='Warm-up epochs before the scheduled window.')
    parser.add_argument('--out', type=str, default='results')
    parser.add_argument('--name', type=str, default='experiment')
    parser.add_argument('--n-jobs', type=int, default=1)
    parser.add_argument('--verbose', '-v', action='count', default=0)
    return parser.parse_args(argv)


def config_from_args(args):
    schemes = sorted(SCHEMES) if args.scheme == 'all' else _split(args.scheme)
    baselines = list(BASELINES) if args.baselines == 'all' else _split(args.baselines)
    ablations = [f.name for f in fields(AblationFlags)] \
        if args.ablate == 'all' else _split(args.ablate)
    return ExperimentConfig(scenario_file=args.config, schemes=tuple(schemes),
                            baselines=tuple(baselines),
                            datacenters=tuple(int(d) for d in _split(args.datacenters)),
                            epochs=args.epochs, seeds=args.seeds, ablations=tuple(ablations),
                            trace=args.trace, base_volume=args.volume,
                            warmup_epochs=args.warmup, out_dir=args.out, name=args.name,
                            n_jobs=args.n_jobs)


def main(argv=None):
    args = parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else \
        logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s %(message)s')
    result = run_experiment(config_from_args(args))
    print(result.phv.to_string(index=False))
    return result


if __name__ == '__main__':
    main()
