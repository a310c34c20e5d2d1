import numpy as np
import pytest

from conftest import make_scenario, make_workload
from greenroute.baselines import BASELINES, Greedy, TabularQ, baseline_schedule, \
    make_baseline, run_baseline
from greenroute.core import ScenarioError
from greenroute.sim import Normalizers, Simulator
from greenroute.trace import synth_trace


@pytest.fixture
def contrast():
    return Simulator(make_scenario(ci=(0.9, 0.0)))


def test_round_robin_is_uniform(contrast):
    state = contrast.initial_state()
    plan = baseline_schedule('round_robin', contrast, state, make_workload(0, [[100]]))
    assert np.allclose(plan.routing, 0.5)


def test_greedy_carbon_picks_clean_datacenter(contrast):
    state = contrast.initial_state()
    plan = baseline_schedule('greedy_carbon', contrast, state, make_workload(0, [[100]]))
    assert plan.routing[0, 0].tolist() == [0., 1.]


def test_greedy_ties_go_to_lower_index(simulator):
    state = simulator.initial_state()
    greedy = Greedy(2)
    # identical water intensities
    values = greedy.pure_plan_values(simulator, state, make_workload(0, [[100]]))
    assert values[0] == pytest.approx(values[1])
    plan = greedy.schedule(simulator, state, make_workload(0, [[100]]))
    assert plan.routing[0, 0].tolist() == [1., 0.]


def test_random_is_seeded(contrast):
    state = contrast.initial_state()
    workload = make_workload(0, [[100]])
    a = baseline_schedule('random', contrast, state, workload, seed=7)
    b = baseline_schedule('random', contrast, state, workload, seed=7)
    c = baseline_schedule('random', contrast, state, workload, seed=8)
    assert a == b
    assert a != c


def test_unknown_baseline():
    with pytest.raises(ValueError):
        make_baseline('helix')


def test_tabular_q_learns_from_executed_epochs(contrast):
    agent = TabularQ(seed=0, epsilon=0.)
    normalizers = Normalizers([1., 1., 1., 1.])
    state = contrast.initial_state()
    for epoch in range(3):
        workload = make_workload(epoch, [[200]])
        plan = agent.schedule(contrast, state, workload, normalizers)
        assert plan.routing[0, 0].max() == pytest.approx(0.75)
        result, next_state = contrast.apply_plan(state, workload, plan)
        agent.observe(state, plan, result, next_state, normalizers)
        state = next_state
    assert np.any(agent.q != 0.)
    assert np.all(agent.q <= 0.)


@pytest.mark.parametrize('kind', BASELINES)
def test_run_baseline(kind):
    scenario = make_scenario(ci=(0.9, 0.0), epochs=4)
    trace = synth_trace('constant', 6, seed=0, model_ids=scenario.model_ids,
                        regions=scenario.regions, base_volume=200)
    run = run_baseline(scenario, kind, trace, seed=1, warmup_epochs=2)
    assert len(run.epoch_metrics) == 4
    assert run.label['framework'] == kind
    assert run.label['n_datacenters'] == 2
    assert len(run.archive) >= 1
    assert len(run.rows) == 8
    again = run_baseline(scenario, kind, trace, seed=1, warmup_epochs=2)
    assert again.totals == run.totals


def test_run_baseline_needs_enough_trace():
    scenario = make_scenario(epochs=4)
    trace = synth_trace('constant', 3, seed=0, model_ids=scenario.model_ids,
                        regions=scenario.regions, base_volume=10)
    with pytest.raises(ScenarioError):
        run_baseline(scenario, 'round_robin', trace)
