import os
import time
from dataclasses import fields

import numpy as np
import pandas as pd
import pytest
import yaml

from conftest import make_scenario
from greenroute.baselines import BASELINES
from greenroute.core import SCHEMES
from greenroute.experiment import ExperimentConfig, build_jobs, confidence_interval, \
    config_from_args, main, parse_args, phv_table, run_experiment
from greenroute.game import AblationFlags, run_scheduler
from greenroute.initialize import standard_scenario
from greenroute.parallel import parallel_process
from greenroute.trace import trace_from_spec

SCHEDULER = {'warmup_epochs': 2, 'agent': {'k_opt': 2, 'her_k': 4},
             'sac': {'actor_hidden': 16, 'critic_hidden': 16, 'film_hidden': 8,
                     'batch_size': 4}}


def square(x):
    return x * x


def test_parallel_process_keeps_order():
    assert parallel_process(range(6), square, n_jobs=1, progress=False) == \
        [0, 1, 4, 9, 16, 25]
    assert parallel_process(range(6), square, n_jobs=3, backend='thread',
                            progress=False) == [0, 1, 4, 9, 16, 25]
    assert parallel_process([{'x': 3}], square, use_kwargs=True, progress=False) == [9]
    with pytest.raises(ValueError):
        parallel_process([1], square, backend='gpu')


def test_confidence_interval():
    mean, half = confidence_interval([1., 2., 3.])
    assert mean == 2.
    assert half == pytest.approx(4.302653 / np.sqrt(3.), rel=1e-5)
    assert confidence_interval([5.]) == (5., 0.)


def test_build_jobs_shares_traces_per_seed():
    scenario = make_scenario(ci=(0.5, 0., 0.2), tou=(0.1,) * 3, gi=(0.2,) * 3,
                             cop=(4.,) * 3, epochs=4, scheduler=SCHEDULER)
    config = ExperimentConfig(schemes=('balanced',), baselines=('random',),
                              datacenters=(2, 3), epochs=4, seeds=2,
                              trace='synthetic:constant', base_volume=100, progress=False)
    jobs = build_jobs(config, scenario)
    assert len(jobs) == 8
    assert sorted({j['scenario'].n_datacenters for j in jobs}) == [2, 3]
    for seed in range(2):
        traces = {id(j['trace']) for j in jobs if j['seed'] == seed}
        assert len(traces) == 1
    assert len(jobs[0]['trace']) == 2 + 4


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(schemes=('min-noise',))
    with pytest.raises(ValueError):
        ExperimentConfig(baselines=('helix',))
    with pytest.raises(ValueError):
        ExperimentConfig(ablations=('no_veto+no_everything',))
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=0)


def test_command_line():
    args = parse_args(['--scheme', 'all', '--baselines', 'round_robin,greedy_carbon',
                       '--datacenters', '4,6,8,12', '--epochs', '96', '--seeds', '3',
                       '--ablate', 'no_phase2,no_veto+no_her', '--trace', 'synthetic:bursty',
                       '--out', 'results', '-v'])
    config = config_from_args(args)
    assert config.schemes == tuple(sorted(SCHEMES))
    assert config.baselines == ('round_robin', 'greedy_carbon')
    assert config.datacenters == (4, 6, 8, 12)
    assert config.ablations == ('no_phase2', 'no_veto+no_her')
    assert config.seeds == 3
    assert config.trace == 'synthetic:bursty'
    assert args.verbose == 1
    assert len(config_from_args(parse_args(['--ablate', 'all'])).ablations) == 7


def test_phv_table_reference_is_experiment_wide():
    summary = pd.DataFrame([
        {'framework': 'scheduler', 'ablation': 'full', 'n_datacenters': 2, 'seed': 0,
         'ttft_s': 1., 'carbon_kg': 1., 'water_l': 1., 'cost_usd': 1.},
        {'framework': 'scheduler', 'ablation': 'no_veto', 'n_datacenters': 2, 'seed': 0,
         'ttft_s': 1.5, 'carbon_kg': 1.5, 'water_l': 1.5, 'cost_usd': 1.5},
        {'framework': 'round_robin', 'ablation': '-', 'n_datacenters': 2, 'seed': 0,
         'ttft_s': 2., 'carbon_kg': 2., 'water_l': 2., 'cost_usd': 2.},
    ])
    table = phv_table(summary).set_index('ablation')
    assert table.loc['full', 'phv'] == pytest.approx(0.5 ** 4)
    assert table.loc['no_veto', 'phv'] == pytest.approx(0.25 ** 4)
    assert table.loc['-', 'phv'] == 0.
    assert table.loc['no_veto', 'phv_vs_full'] == pytest.approx(1. / 16.)
    assert np.isnan(table.loc['-', 'phv_vs_full'])


def test_phv_vs_full_is_nan_without_full_volume():
    summary = pd.DataFrame([
        {'framework': 'scheduler', 'ablation': 'full', 'n_datacenters': 2, 'seed': 0,
         'ttft_s': 2., 'carbon_kg': 1., 'water_l': 1., 'cost_usd': 1.},
        {'framework': 'scheduler', 'ablation': 'no_veto', 'n_datacenters': 2, 'seed': 0,
         'ttft_s': 1., 'carbon_kg': 2., 'water_l': 2., 'cost_usd': 2.},
    ])
    table = phv_table(summary).set_index('ablation')
    assert table.loc['full', 'phv'] == 0.
    assert np.isnan(table.loc['full', 'phv_vs_full'])
    assert np.isnan(table.loc['no_veto', 'phv_vs_full'])


def test_small_experiment(tmp_path):
    # one request group per node, so totals move with the routing
    scenario = make_scenario(ci=(0.9, 0.1), tou=(0.05, 0.2), gi=(0.2, 5.), cop=(4., 3.),
                             nodes=40, epochs=4, scheduler=SCHEDULER)
    config = ExperimentConfig(schemes=('balanced', 'min-carbon'),
                              baselines=('round_robin', 'greedy_carbon'), epochs=2, seeds=2,
                              ablations=('no_veto',), trace='synthetic:constant',
                              base_volume=200, out_dir=str(tmp_path), progress=False)
    result = run_experiment(config, scenario)

    assert len(result.runs) == 12
    assert len(result.summary) == 12
    assert len(result.metrics) == 12 * 2 * 2
    assert list(result.metrics.columns) == [
        'framework', 'scheme', 'ablation', 'n_datacenters', 'seed', 'epoch', 'dc',
        'ttft_s', 'carbon_kg', 'water_l', 'cost_usd', 'e_it_kwh', 'queued', 'sla_violations']
    assert set(result.summary.framework) == {'scheduler', 'round_robin', 'greedy_carbon'}
    assert len(result.phv) == 4
    assert np.all((result.phv.phv >= 0.) & (result.phv.phv <= 1.))
    full = result.phv[(result.phv.framework == 'scheduler') & (result.phv.ablation == 'full')]
    assert full.phv.iloc[0] > 0.
    assert full.phv_vs_full.iloc[0] == pytest.approx(1.)
    assert set(result.aggregates.n_seeds) == {2}
    assert {'ttft_s', 'carbon_kg', 'water_l', 'cost_usd', 'epoch'} <= set(result.pareto.columns)

    for key in ('metrics', 'summary', 'pareto', 'phv', 'aggregates', 'manifest'):
        assert os.path.exists(result.files[key])
    assert result.files['metrics'] == os.path.join(str(tmp_path), 'experiment.metrics.csv')
    with open(result.files['manifest']) as f:
        manifest = yaml.safe_load(f)
    assert manifest['config']['seeds'] == 2
    assert 'greenroute' in manifest['versions']
    assert manifest['scheduler']['warmup_epochs'] == 2


def test_experiment_is_reproducible():
    scenario = make_scenario(epochs=4, scheduler=SCHEDULER)
    config = ExperimentConfig(schemes=('min-water',), baselines=('random',), epochs=2,
                              trace='synthetic:constant', base_volume=100, out_dir=None,
                              progress=False)
    a = run_experiment(config, scenario)
    b = run_experiment(config, scenario)
    pd.testing.assert_frame_equal(a.summary, b.summary)
    assert a.files == {}


@pytest.mark.slow
def test_command_line_run(tmp_path, capsys):
    result = main(['--datacenters', '4', '--epochs', '4', '--warmup', '4', '--seeds', '1',
                   '--baselines', 'round_robin,greedy_carbon', '--ablate', 'no_phase2',
                   '--volume', '2000', '--out', str(tmp_path)])
    out = capsys.readouterr().out
    assert '---- Saved: %s' % os.path.join(str(tmp_path), 'experiment.phv.csv') in out
    assert set(result.summary.n_datacenters) == {4}
    assert len(result.summary) == 4


@pytest.mark.slow
def test_scheduler_front_dominates_baselines():
    config = ExperimentConfig(schemes=tuple(sorted(SCHEMES)), baselines=BASELINES,
                              datacenters=(8,), epochs=96, seeds=3, out_dir=None,
                              progress=False)
    phv = run_experiment(config).phv
    ours = phv[(phv.framework == 'scheduler') & (phv.ablation == 'full')].phv.iloc[0]
    best_baseline = phv[phv.framework != 'scheduler'].phv.max()
    assert ours >= 1.3 * best_baseline


@pytest.mark.slow
def test_ablations_do_not_beat_full_configuration():
    ablations = tuple(f.name for f in fields(AblationFlags))
    config = ExperimentConfig(schemes=('balanced',), datacenters=(4,), epochs=96, seeds=3,
                              ablations=ablations, out_dir=None, progress=False)
    phv = run_experiment(config).phv.set_index('ablation')
    assert phv.loc['full', 'phv'] > 0.
    assert phv.loc['no_phase2', 'phv_vs_full'] <= 0.9
    for name in ablations:
        assert phv.loc[name, 'phv_vs_full'] <= 1., name


@pytest.mark.slow
def test_runtime_scales_linearly_and_water_falls_with_more_sites():
    scenario = standard_scenario(n_datacenters=12, epochs=96)
    trace = trace_from_spec('synthetic:diurnal', scenario, 8 + 96, seed=0)
    counts = (4, 6, 8, 12)
    seconds, water = [], []
    for n in counts:
        start = time.perf_counter()
        run = run_scheduler(scenario.subset(n), 'balanced', trace, seed=0)
        seconds.append(time.perf_counter() - start)
        water.append(run.totals.water_l)
    fit = np.polyval(np.polyfit(counts, seconds, 1), counts)
    assert np.all(np.asarray(seconds) <= 1.5 * fit)
    assert water[-1] <= water[0]
