#! /usr/bin/env python
"""
baselines.py
Reference schedulers the two-phase scheduler is compared against: uniform
round robin, seeded random routing, greedy single-metric routing and a
small tabular Q-learner. Every baseline sees what the scheduler sees (the
state and the forecast workload) and is run through the same simulator.
"""

import logging

import numpy as np
from tqdm import tqdm

from greenroute.core import ObjectiveWeights, ScenarioError, SchedulingPlan
from greenroute.forecast import WorkloadPredictor
from greenroute.sim import Normalizers, RunRecorder, Simulator, warm_up, \
    weighted_objective
from greenroute.utils import METRIC_NAMES

logger = logging.getLogger(__name__)

GREEDY_METRICS = {'greedy_latency': 0, 'greedy_carbon': 1,
                  'greedy_water': 2, 'greedy_cost': 3}
BASELINES = ('round_robin', 'random') + tuple(GREEDY_METRICS) + ('tabular_q',)


################################
#                              #
#  Baseline Classes            #
#                              #
################################

class Baseline:
    name = 'baseline'

    def __repr__(self):
        return '%s()' % type(self).__name__

    def schedule(self, simulator, state, workload, normalizers=None):
        raise NotImplementedError

    def observe(self, state, plan, result, next_state, normalizers):
        pass


class RoundRobin(Baseline):
    """Every row spread evenly over the datacenters."""
    name = 'round_robin'

    def schedule(self, simulator, state, workload, normalizers=None):
        return SchedulingPlan.uniform(*simulator.scenario.plan_shape)


class RandomRouting(Baseline):
    name = 'random'

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def schedule(self, simulator, state, workload, normalizers=None):
        M, R, D = simulator.scenario.plan_shape
        return SchedulingPlan(self.rng.dirichlet(np.ones(D), size=(M, R)))


class Greedy(Baseline):
    """
    Probes every pure plan on the workload and sends all requests to the
    datacenter with the lowest value of one metric. Ties go to the lower
    datacenter index.
    """

    def __init__(self, metric):
        self.metric = int(metric)
        self.name = 'greedy_%s' % ('latency', 'carbon', 'water', 'cost')[self.metric]

    def __repr__(self):
        return 'Greedy(%s)' % METRIC_NAMES[self.metric]

    def pure_plan_values(self, simulator, state, workload):
        M, R, D = simulator.scenario.plan_shape
        return np.array([simulator.evaluate_plan(state, workload,
                                                 SchedulingPlan.pure(M, R, D, d))[self.metric]
                         for d in range(D)])

    def schedule(self, simulator, state, workload, normalizers=None):
        M, R, D = simulator.scenario.plan_shape
        values = self.pure_plan_values(simulator, state, workload)
        return SchedulingPlan.pure(M, R, D, int(np.argmin(values)))


class TabularQ(Baseline):
    """
    One Q table per model class over (time-of-day bucket, load bucket)
    states; the action is the datacenter that gets half of the class's
    requests, the other half being spread evenly. Rewarded with the
    negative balanced objective of the executed epoch.
    """
    name = 'tabular_q'

    def __init__(self, seed=0, epsilon=0.1, lr=0.1, gamma=0.9, hour_buckets=4,
                 load_buckets=3, preferred_mass=0.5):
        self.rng = np.random.default_rng(seed)
        self.epsilon = epsilon
        self.lr = lr
        self.gamma = gamma
        self.hour_buckets = hour_buckets
        self.load_buckets = load_buckets
        self.preferred_mass = preferred_mass
        self.weights = ObjectiveWeights.for_scheme('balanced')
        self.q = None
        self._peak = 1.
        self._last = None

    def _state_index(self, simulator, state, workload):
        hours = (simulator.series_epoch(state.epoch) * simulator.scenario.epoch_hours) % 24.
        hour = int(hours * self.hour_buckets // 24) % self.hour_buckets
        self._peak = max(self._peak, workload.total)
        load = min(int(self.load_buckets * workload.total / self._peak), self.load_buckets - 1)
        return hour * self.load_buckets + load

    def schedule(self, simulator, state, workload, normalizers=None):
        M, R, D = simulator.scenario.plan_shape
        if self.q is None:
            self.q = np.zeros((M, self.hour_buckets * self.load_buckets, D))
        s = self._state_index(simulator, state, workload)
        self._learn(s)
        actions = np.where(self.rng.random(M) < self.epsilon,
                           self.rng.integers(0, D, M), np.argmax(self.q[:, s], axis=1))
        routing = np.full((M, R, D), (1. - self.preferred_mass) / D)
        routing[np.arange(M), :, actions] += self.preferred_mass
        self._last = (s, actions, None)
        return SchedulingPlan(routing / routing.sum(axis=-1, keepdims=True))

    def observe(self, state, plan, result, next_state, normalizers):
        if self._last is not None:
            s, actions, _ = self._last
            self._last = (s, actions, -weighted_objective(result.metrics, self.weights,
                                                          normalizers))

    def _learn(self, next_s):
        # the previous epoch bootstraps from the state just observed
        if self._last is None or self._last[2] is None:
            return
        s, actions, r = self._last
        for m, a in enumerate(actions):
            target = r + self.gamma * self.q[m, next_s].max()
            self.q[m, s, a] += self.lr * (target - self.q[m, s, a])


def make_baseline(kind, seed=0):
    if kind == 'round_robin':
        return RoundRobin()
    if kind == 'random':
        return RandomRouting(seed)
    if kind in GREEDY_METRICS:
        return Greedy(GREEDY_METRICS[kind])
    if kind == 'tabular_q':
        return TabularQ(seed)
    raise ValueError('unknown baseline %r, expected one of %s' % (kind, BASELINES))


def baseline_schedule(kind, simulator, state, workload, seed=0, normalizers=None):
    """One-shot plan from a freshly built baseline."""
    return make_baseline(kind, seed).schedule(simulator, state, workload, normalizers)


def run_baseline(scenario, kind, trace, seed=0, warmup_epochs=8, predictor_alpha=0.3,
                 predictor_window=8, sim_config=None, epochs=None, progress=False):
    """
    Runs one baseline over `trace` with the same warm-up, forecasting and
    archive bookkeeping as the scheduler. Returns a RunResult.
    """
    baseline = make_baseline(kind, seed)
    epochs = scenario.epochs if epochs is None else epochs
    if len(trace) < epochs:
        raise ScenarioError(['trace has %i epochs, needs %i' % (len(trace), epochs)])
    warmup = min(warmup_epochs, len(trace) - epochs)

    simulator = Simulator(scenario, sim_config, series_offset=warmup)
    normalizers = Normalizers()
    predictor = WorkloadPredictor(scenario.model_ids, scenario.regions,
                                  predictor_alpha, predictor_window)
    state = warm_up(simulator, simulator.initial_state(0), trace[:warmup],
                    normalizers, predictor)

    recorder = RunRecorder(framework=kind, scheme='-', seed=seed, ablation='-',
                           n_datacenters=scenario.n_datacenters)
    for e in tqdm(range(warmup, warmup + epochs), disable=not progress, leave=False):
        actual = trace[e]
        state = state.with_forecast(predictor.predict())
        plan = baseline.schedule(simulator, state, predictor.forecast_workload(e), normalizers)
        result, next_state = simulator.apply_plan(state, actual, plan)
        baseline.observe(state, plan, result, next_state, normalizers)
        recorder.record(result, e - warmup)
        normalizers.update(result.metrics)
        predictor.update(actual)
        state = next_state

    run = recorder.finish()
    logger.info('baseline %s seed %i: %s', kind, seed, run.totals)
    return run
