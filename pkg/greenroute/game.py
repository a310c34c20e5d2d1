#! /usr/bin/env python
"""
game.py
The two-phase scheduler. In phase 1 one soft actor-critic agent per
objective trains against what-if simulations of the forecast epoch, imitates
the best plan it saw and proposes its exploit plan. In phase 2 the proposals
are blended by critic utility, refined by gradient ascent on the
capital-weighted critics, pulled by vetoes from agents with enough capital
and evaluated. The best proposal replaces a consensus that scores worse, and
the capital ledger is settled.
"""

import logging
from collections import deque
from dataclasses import dataclass, field, fields
from functools import partial

import numpy as np
from tqdm import tqdm

from greenroute.core import ObjectiveWeights, ScenarioError, SchedulingPlan, \
    SimulationError
from greenroute.forecast import WorkloadPredictor
from greenroute.neural import DualReplayBuffer, SacAgent, SacConfig, \
    goal_distance_reward, her_relabel
from greenroute.parallel import parallel_process
from greenroute.sim import Normalizers, RunRecorder, SimulationConfig, \
    Simulator, warm_up, weighted_objective
from greenroute.simplex import project_rows

logger = logging.getLogger(__name__)

OBJECTIVES = ('latency', 'carbon', 'water', 'cost')


def _from_dict(cls, data, section):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ScenarioError(['%s: unknown keys %s' % (section, unknown)])
    return cls(**data)


################################
#                              #
#  Configuration               #
#                              #
################################

@dataclass(frozen=True)
class AgentConfig:
    objective: int = 0
    weight: float = 0.25
    k_opt: int = 8
    ema_weight: float = 0.1
    c_eco: float = 0.1
    c_sla: float = 1.0
    ema_alpha: float = 0.2
    goal_coeff: float = 0.1
    her_k: int = 32
    updates_per_iteration: int = 1
    deterministic: bool = False
    anchor_plans: bool = True
    imitation_steps: int = 20

    def __post_init__(self):
        if self.k_opt < 1:
            raise ValueError('k_opt must be >= 1')
        if self.imitation_steps < 0:
            raise ValueError('imitation_steps must be >= 0')
        if not 0 <= self.objective < len(OBJECTIVES):
            raise ValueError('objective must index one of %s' % (OBJECTIVES,))
        for name in ('weight', 'ema_weight', 'c_eco', 'c_sla', 'goal_coeff'):
            if getattr(self, name) < 0:
                raise ValueError('%s must be >= 0' % name)
        if not 0 < self.ema_alpha <= 1:
            raise ValueError('ema_alpha must be in (0, 1]')


@dataclass(frozen=True)
class AblationFlags:
    no_veto: bool = False
    no_film: bool = False
    no_sgd: bool = False
    no_dual_buffer: bool = False
    no_her: bool = False
    no_capital: bool = False
    no_phase2: bool = False

    @property
    def label(self):
        active = [f.name for f in fields(self) if getattr(self, f.name)]
        return '+'.join(active) if active else 'full'

    @classmethod
    def from_names(cls, names):
        if isinstance(names, str):
            names = [n for n in names.split(',') if n]
        known = [f.name for f in fields(cls)]
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ValueError('unknown ablation flags %s, expected from %s' % (unknown, known))
        return cls(**{n: True for n in names})


@dataclass(frozen=True)
class GameConfig:
    sgd_steps: int = 5
    sgd_lr: float = 0.05
    veto_until_quiescent: bool = False
    max_veto_rounds: int = 5
    keep_best: bool = False
    fallback_to_best_proposal: bool = True
    warmup_epochs: int = 8
    predictor_alpha: float = 0.3
    predictor_window: int = 8
    n_jobs: int = 1
    agent: dict = field(default_factory=dict)
    sac: dict = field(default_factory=dict)
    capital: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, 'scheduler')

    def agent_config(self, objective, weight, **overrides):
        data = dict(self.agent)
        data.update(overrides)
        return _from_dict(AgentConfig, dict(data, objective=objective, weight=weight), 'agent')

    def sac_config(self, **overrides):
        data = dict(self.sac)
        data.update(overrides)
        return SacConfig.from_dict(data)


################################
#                              #
#  CapitalLedger Class         #
#                              #
################################

class CapitalLedger:
    """
    Bounded capital per agent. Capital at or above c_thresh grants a veto;
    the utility-loss threshold is fixed when delta_thresh is given and
    otherwise a fraction of the running interquartile range of observed
    critic values.
    """

    def __init__(self, n_agents, c_min=0., c_max=300., initial=100., c_thresh=150.,
                 veto_max=0.5, eta=0.1, beta=0.7, delta_thresh=None,
                 delta_iqr_fraction=0.1, q_history=1000):
        if not c_min <= initial <= c_max:
            raise ValueError('initial capital must lie in [c_min, c_max]')
        if not (c_thresh > 0 and veto_max > 0):
            raise ValueError('c_thresh and veto_max must be positive')
        if delta_thresh is not None and not delta_thresh > 0:
            raise ValueError('delta_thresh must be positive')
        if not 0 <= beta <= 1 or eta < 0:
            raise ValueError('beta must be in [0, 1] and eta >= 0')
        self.c_min = c_min
        self.c_max = c_max
        self.c_thresh = c_thresh
        self.veto_max = veto_max
        self.eta = eta
        self.beta = beta
        self.delta_iqr_fraction = delta_iqr_fraction
        self._delta_thresh = delta_thresh
        self.capital = np.full(n_agents, float(initial))
        self._q = deque(maxlen=q_history)

    def __repr__(self):
        return 'CapitalLedger(%s)' % np.array2string(self.capital, precision=1)

    @classmethod
    def from_dict(cls, n_agents, data):
        return cls(n_agents, **dict(data or {}))

    def observe_q(self, values):
        self._q.extend(float(v) for v in np.ravel(values))

    @property
    def delta_thresh(self):
        if self._delta_thresh is not None:
            return self._delta_thresh
        if len(self._q) < 4:
            return 1e-6
        q75, q25 = np.percentile(np.array(self._q), [75, 25])
        return max(self.delta_iqr_fraction * (q75 - q25), 1e-6)

    def can_veto(self, j):
        return self.capital[j] >= self.c_thresh

    def update(self, perf, bonus, active=None):
        target = self.c_max * (self.beta * np.asarray(perf) + (1. - self.beta) * np.asarray(bonus))
        updated = np.clip(self.capital + self.eta * (target - self.capital), self.c_min, self.c_max)
        if active is not None:
            updated = np.where(active, updated, self.capital)
        self.capital = updated
        return self


################################
#                              #
#  Phase 1                     #
#                              #
################################

def reward(metric_j, config, ema_score=0., idle_fraction=0., mean_ttft_s=0., sla_s=2.):
    """
    r = ema_weight * EMA(past scores) + c_eco * idle node fraction
        - normalized metric_j - c_sla * relative SLA excess
    """
    penalty = config.c_sla * max(0., mean_ttft_s - sla_s) / sla_s
    return float(config.ema_weight * ema_score + config.c_eco * idle_fraction
                 - metric_j - penalty)


class FeatureBuilder:
    """Turns an EnvState into the agents' state and FiLM context vectors."""

    def __init__(self, simulator):
        scenario = simulator.scenario
        self.simulator = simulator
        dcs = scenario.datacenters
        self.ci_scale = max(max(float(np.max(d.ci_series)) for d in dcs), 1e-9)
        self.tou_scale = max(max(float(np.max(d.tou_series)) for d in dcs), 1e-9)
        self.gi_scale = max(max(d.gi_l_per_kwh for d in dcs), 1e-9)
        self.cop_scale = max(d.cop for d in dcs)
        self.n_nodes = np.array([layout.n_nodes for layout in simulator.layouts])
        M, R, D = scenario.plan_shape
        self.state_dim = 2 + D + D * M + M * R + 2 * D + 1
        self.context_dim = 5 * D + M * R + 1

    def _forecast(self, state):
        shape = self.simulator.scenario.plan_shape[:2]
        forecast = np.zeros(shape) if state.forecast is None else state.forecast
        total = forecast.sum()
        return forecast.ravel() / max(total, 1.), np.log1p(total) / 15.

    def state(self, state):
        shares, volume = self._forecast(state)
        hours = (self.simulator.series_epoch(state.epoch) * self.simulator.scenario.epoch_hours) % 24.
        angle = 2. * np.pi * hours / 24.
        queued = state.queue.sum(axis=(0, 1)) / max(state.queue.sum() + 1., 1.)
        return np.concatenate([[np.sin(angle), np.cos(angle)], queued,
                               state.warm_fraction.ravel(), shares,
                               state.ci / self.ci_scale, state.tou / self.tou_scale, [volume]])

    def context(self, state):
        shares, volume = self._forecast(state)
        per_dc = np.stack([state.ci / self.ci_scale, state.gi / self.gi_scale,
                           state.tou / self.tou_scale, state.cop / self.cop_scale,
                           state.availability / self.n_nodes], axis=1)
        return np.concatenate([per_dc.ravel(), shares, [volume]])


@dataclass(eq=False)
class Proposal:
    agent: int
    plan: SchedulingPlan
    metrics: object
    reward: float


class SchedulingAgent:
    """One objective's learner: SAC networks, buffers, reward history and goal."""

    def __init__(self, config, features, plan_shape, sac_config=None, dual_buffer=True, seed=0):
        self.config = config
        self.sac = SacAgent(features.state_dim, features.context_dim, plan_shape,
                            config=sac_config, seed=seed)
        cfg = self.sac.config
        self.buffer = DualReplayBuffer(cfg.replay_capacity, cfg.cross_capacity,
                                       cfg.cross_fraction, dual=dual_buffer)
        self.rng = np.random.default_rng(seed + 7919)
        self.score_ema = 0.
        self._scored = False
        self.goal = np.ones(4)
        self._goal_reward = -np.inf

    def __repr__(self):
        return 'SchedulingAgent(%s, w=%.2f, buffer=%i)' % (
            OBJECTIVES[self.config.objective], self.config.weight, len(self.buffer))

    @property
    def objective(self):
        return self.config.objective

    def observe_score(self, score):
        if not self._scored:
            self.score_ema = score
            self._scored = True
        else:
            a = self.config.ema_alpha
            self.score_ema = (1. - a) * self.score_ema + a * score

    def critic_view(self, features, state):
        return CriticProbe(self.sac, features.state(state), self.goal)

    def _score(self, simulator, state, workload, plan, normalizers):
        try:
            result, next_state = simulator.simulate(state, workload, SchedulingPlan(plan))
        except SimulationError as exc:
            raise SimulationError('epoch %i, %s agent: %s' %
                                  (state.epoch, OBJECTIVES[self.objective], exc)) from exc
        achieved = normalizers.normalize(result.metrics)
        base = reward(achieved[self.objective], self.config, self.score_ema,
                      result.idle_fraction, result.mean_ttft_s, simulator.scenario.sla_s)
        return result, next_state, achieved, base

    def anchor_plans(self, simulator):
        """Every pure plan, and the plan sending each region to its nearest datacenter."""
        M, R, D = simulator.scenario.plan_shape
        plans = [SchedulingPlan.pure(M, R, D, d).routing for d in range(D)]
        nearest = np.zeros((M, R, D))
        nearest[:, np.arange(R), np.argmin(simulator.net_ms, axis=1)] = 1.
        plans.append(nearest)
        return plans

    def _explore(self, simulator, state, workload, plan, normalizers, features, s, c):
        """Scores one what-if plan and stores the transition. Returns
        (Proposal, normalized metrics)."""
        result, next_state, achieved, base = self._score(simulator, state, workload,
                                                         plan, normalizers)
        next_state = next_state.with_forecast(state.forecast) \
            if state.forecast is not None else next_state
        self.buffer.push(state=s, goal=self.goal, context=c, plan=plan.ravel(),
                         reward=goal_distance_reward(base, achieved, self.goal,
                                                     self.config.goal_coeff)[0],
                         next_state=features.state(next_state),
                         next_context=features.context(next_state), done=0.,
                         base_reward=base, achieved=achieved)
        return Proposal(self.objective, SchedulingPlan(plan), result.metrics, base), achieved

    def train_epoch(self, simulator, state, workload, normalizers, features,
                    flags=AblationFlags(), keep_best=False):
        """
        Anchor plans first, then k_opt sampled iterations with SAC updates.
        The actor imitates the best plan seen so far this epoch before the
        deterministic exploit plan is evaluated, relabeled into the cross
        buffer and returned.
        """
        cfg = self.config
        batch_size = self.sac.config.batch_size
        goal_reward = partial(goal_distance_reward, coeff=cfg.goal_coeff)
        s = features.state(state)
        c = features.context(state)

        best = None
        scores = []
        anchors = self.anchor_plans(simulator) if cfg.anchor_plans else []
        for plan in anchors:
            proposal, _ = self._explore(simulator, state, workload, plan, normalizers,
                                        features, s, c)
            if best is None or proposal.reward > best.reward:
                best = proposal
        for _ in range(cfg.k_opt):
            plan, _ = self.sac.act(s, self.goal, c, self.rng, cfg.deterministic)
            proposal, achieved = self._explore(simulator, state, workload, plan, normalizers,
                                               features, s, c)
            scores.append(-achieved[self.objective])
            if len(self.buffer) >= batch_size:
                for _ in range(cfg.updates_per_iteration):
                    self.sac.update(self.buffer.sample(batch_size, self.rng))
            if best is None or proposal.reward > best.reward:
                best = proposal

        if cfg.imitation_steps:
            self.sac.imitate(s, self.goal, best.plan.routing, c, cfg.imitation_steps)
        plan, _ = self.sac.act(s, self.goal, c, self.rng, deterministic=True)
        result, _, achieved, base = self._score(simulator, state, workload, plan, normalizers)
        exploit = Proposal(cfg.objective, SchedulingPlan(plan), result.metrics, base)
        # score average is fixed within an epoch
        for score in scores:
            self.observe_score(score)
        if not flags.no_her:
            her_relabel(self.buffer, achieved, cfg.her_k, self.rng, goal_reward)

        chosen = best if keep_best and best.reward > exploit.reward else exploit
        if chosen.reward > self._goal_reward:
            self._goal_reward = chosen.reward
            self.goal = normalizers.normalize(chosen.metrics)
        return chosen


def phase1_train_epoch(simulator, state, workload_forecast, agents, normalizers,
                       features, flags=AblationFlags(), keep_best=False, n_jobs=1):
    """
    Trains every agent on what-if simulations of the forecast workload and
    returns their proposals in agent order. Agents share nothing mutable,
    so they may train on threads.
    """
    def train(agent):
        return agent.train_epoch(simulator, state, workload_forecast, normalizers,
                                 features, flags, keep_best)
    return parallel_process(agents, train, n_jobs=n_jobs, backend='thread', progress=False)


################################
#                              #
#  Phase 2                     #
#                              #
################################

class CriticProbe:
    """A trained agent's min-twin critic at a fixed state and goal."""

    def __init__(self, sac, state_vector, goal):
        self.sac = sac
        self.state_vector = state_vector
        self.goal = goal

    def value(self, plan):
        return self.sac.q_value(self.state_vector, self.goal, plan)

    def gradient(self, plan):
        return self.sac.q_gradient(self.state_vector, self.goal, plan)


@dataclass(eq=False)
class ConsensusOutcome:
    plan: SchedulingPlan
    metrics: object
    capitals: np.ndarray
    vetoes: list
    q_values: np.ndarray
    blend_weights: np.ndarray
    fallback: int = None


def _as_routing(plan):
    return plan.routing if isinstance(plan, SchedulingPlan) else np.asarray(plan, dtype=float)


def phase2_consensus(proposals, critics, ledger, config=GameConfig(), weights=None,
                     flags=AblationFlags(), evaluate=None, proposal_metrics=None,
                     objectives=None, score=None):
    """
    The consensus game over agent proposals:

        1. blend the proposals with weights proportional to their critics'
           (shifted, scheme-weighted) utilities
        2. ascend the capital-weighted mean critic with respect to the
           blended plan, projecting back onto the simplex after each step
        3. let every agent with enough capital whose utility loss exceeds
           the threshold pull the plan toward its proposal, largest loss
           first
        4. evaluate the plan, replace it by the best proposal when that one
           scores lower, and settle capital

    `evaluate(SchedulingPlan) -> MetricsVector` and `proposal_metrics` are
    needed for the capital settlement; `score(MetricsVector) -> float`,
    lower is better, enables the replacement.
    """
    props = [_as_routing(p) for p in proposals]
    n = len(props)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    objectives = list(range(n)) if objectives is None else list(objectives)

    q = np.array([critic.value(a) for critic, a in zip(critics, props)])
    ledger.observe_q(q)
    utility = q - q.min() if q.min() < 0 else q.copy()
    utility = utility * w

    capital = np.ones(n) if flags.no_capital else ledger.capital.copy()
    omega = capital * w
    if omega.sum() <= 0:
        omega = w.copy() if w.sum() > 0 else np.ones(n)
    omega = omega / omega.sum()

    blend = utility / utility.sum() if utility.sum() > 0 else omega
    plan = np.tensordot(blend, np.stack(props), axes=1)

    if not flags.no_sgd:
        for _ in range(config.sgd_steps):
            grad = sum(o * critic.gradient(plan) for o, critic in zip(omega, critics) if o > 0)
            plan = project_rows(plan + config.sgd_lr * grad)

    vetoes = []
    if not flags.no_veto:
        plan, vetoes = _veto_pass(plan, props, critics, ledger, w, config, flags)

    plan = SchedulingPlan(project_rows(plan))
    metrics = evaluate(plan) if evaluate is not None else None
    fallback = None
    if config.fallback_to_best_proposal and score is not None and metrics is not None \
            and proposal_metrics is not None:
        scores = [score(m) if o > 0 else np.inf for m, o in zip(proposal_metrics, w)]
        k = int(np.argmin(scores))
        if scores[k] < score(metrics):
            plan, metrics, fallback = SchedulingPlan(props[k]), proposal_metrics[k], k
            logger.debug('consensus scored worse than proposal %i, using it', k)
    if metrics is not None and proposal_metrics is not None and not flags.no_capital:
        update_capital(ledger, metrics, proposal_metrics, props, plan, objectives, active=w > 0)
    return ConsensusOutcome(plan=plan, metrics=metrics, capitals=ledger.capital.copy(),
                            vetoes=vetoes, q_values=q, blend_weights=blend, fallback=fallback)


def _veto_pass(plan, props, critics, ledger, w, config, flags):
    thresh = ledger.delta_thresh
    rounds = config.max_veto_rounds if config.veto_until_quiescent else 1
    vetoes = []
    for round_index in range(rounds):
        deltas = np.array([critic.value(a) - critic.value(plan)
                           for critic, a in zip(critics, props)])
        eligible = [j for j in range(len(props))
                    if w[j] > 0 and deltas[j] > thresh
                    and (flags.no_capital or ledger.can_veto(j))]
        fired = False
        for j in sorted(eligible, key=lambda k: -deltas[k]):
            delta = critics[j].value(props[j]) - critics[j].value(plan)
            if delta <= thresh:
                continue
            strength = min(ledger.veto_max, ledger.veto_max * delta / thresh)
            plan = project_rows(plan + strength * (props[j] - plan))
            vetoes.append({'agent': j, 'strength': float(strength), 'delta': float(delta),
                           'round': round_index})
            fired = True
        if not fired:
            break
    return plan, vetoes


def update_capital(ledger, consensus_metrics, proposal_metrics, proposals,
                   consensus_plan, objectives=None, active=None):
    """
    Perf_j is how well the consensus served objective j, min-max scaled
    over the proposals; Bonus_j is how close agent j's proposal is to the
    consensus in L1 over the plan rows.
    """
    props = [_as_routing(p) for p in proposals]
    consensus = _as_routing(consensus_plan)
    n = len(props)
    objectives = list(range(n)) if objectives is None else list(objectives)
    c_values = consensus_metrics.as_array()
    p_values = np.array([m.as_array() for m in proposal_metrics])
    n_rows = consensus.shape[0] * consensus.shape[1]

    perf = np.ones(n)
    bonus = np.ones(n)
    for k, j in enumerate(objectives):
        column = np.append(p_values[:, j], c_values[j])
        lo, hi = column.min(), column.max()
        if hi > lo:
            perf[k] = np.clip(1. - (c_values[j] - lo) / (hi - lo), 0., 1.)
        bonus[k] = 1. - np.abs(props[k] - consensus).sum() / (2. * n_rows)
    return ledger.update(perf, np.clip(bonus, 0., 1.), active)


################################
#                              #
#  Scheduler Run               #
#                              #
################################

def run_scheduler(scenario, scheme, trace, seed=0, flags=AblationFlags(), config=None,
                  sim_config=None, epochs=None, progress=False):
    """
    Runs the two-phase scheduler over `trace`: warm-up epochs first, then
    per epoch forecast, phase 1, phase 2, apply the consensus plan and
    update the predictor. Returns a RunResult whose archive also holds
    every agent proposal evaluated on the actual epoch.
    """
    config = config or GameConfig.from_dict(scenario.scheduler)
    epochs = scenario.epochs if epochs is None else epochs
    weights = ObjectiveWeights.for_scheme(scheme)
    if len(trace) < epochs:
        raise ScenarioError(['trace has %i epochs, needs %i' % (len(trace), epochs)])
    warmup = min(config.warmup_epochs, len(trace) - epochs)

    simulator = Simulator(scenario, sim_config, series_offset=warmup)
    features = FeatureBuilder(simulator)
    normalizers = Normalizers()
    predictor = WorkloadPredictor(scenario.model_ids, scenario.regions,
                                  config.predictor_alpha, config.predictor_window)
    state = warm_up(simulator, simulator.initial_state(0), trace[:warmup],
                    normalizers, predictor)

    active = [j for j, w in enumerate(weights.w) if w > 0]
    sac_config = config.sac_config(use_film=not flags.no_film)
    agents = [SchedulingAgent(config.agent_config(j, weights.w[j]), features,
                              scenario.plan_shape, sac_config,
                              dual_buffer=not flags.no_dual_buffer,
                              seed=seed * 1009 + j)
              for j in active]
    agent_weights = np.array([weights.w[j] for j in active])
    ledger = CapitalLedger.from_dict(len(agents), config.capital)

    recorder = RunRecorder(framework='scheduler', scheme=scheme, seed=seed,
                           ablation=flags.label, n_datacenters=scenario.n_datacenters)
    capitals, n_vetoes, n_fallbacks = [], 0, 0
    for e in tqdm(range(warmup, warmup + epochs), disable=not progress, leave=False):
        actual = trace[e]
        state = state.with_forecast(predictor.predict())
        forecast = predictor.forecast_workload(e)

        proposals = phase1_train_epoch(simulator, state, forecast, agents, normalizers,
                                       features, flags, config.keep_best, config.n_jobs)
        if flags.no_phase2:
            scores = [weighted_objective(p.metrics, weights, normalizers) for p in proposals]
            plan = proposals[int(np.argmin(scores))].plan
        else:
            critics = [agent.critic_view(features, state) for agent in agents]
            outcome = phase2_consensus(
                [p.plan for p in proposals], critics, ledger, config, agent_weights, flags,
                evaluate=partial(simulator.evaluate_plan, state, forecast),
                proposal_metrics=[p.metrics for p in proposals],
                objectives=[agent.objective for agent in agents],
                score=partial(weighted_objective, weights=weights, normalizers=normalizers))
            plan = outcome.plan
            n_vetoes += len(outcome.vetoes)
            n_fallbacks += outcome.fallback is not None
        capitals.append(ledger.capital.copy())

        for p in proposals:
            recorder.offer(simulator.evaluate_plan(state, actual, p.plan), e - warmup,
                           'proposal-%s' % OBJECTIVES[p.agent])
        result, state = simulator.apply_plan(state, actual, plan)
        recorder.record(result, e - warmup)
        normalizers.update(result.metrics)
        predictor.update(actual)

    recorder.extras.update({'capitals': np.array(capitals), 'vetoes': n_vetoes,
                            'fallbacks': n_fallbacks, 'final_plan': plan})
    run = recorder.finish()
    logger.info('scheduler %s seed %i (%s): %s, final datacenter mass %s', scheme, seed,
                flags.label, run.totals, np.round(plan.datacenter_mass(), 3))
    return run
