#! /usr/bin/env python
"""
sim.py
The epoch-stepped environment. A SchedulingPlan splits an epoch's requests
across datacenters; inside each datacenter a round-robin balancer deals
request groups onto nodes without overflowing their memory, and whatever
does not fit waits for the next epoch at the same site.
"""

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from greenroute.core import MetricsVector, PlanError, ScenarioError, \
    SchedulingPlan, SimulationError
from greenroute.pareto import ParetoFront
from greenroute.physics import EpochAllocation, SECONDS_PER_HOUR, \
    carbon_emissions, datacenter_energy, epoch_ttft, group_ttft, \
    latency_table, water_usage

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('epoch', 'dc', 'ttft_s', 'carbon_kg', 'water_l', 'cost_usd',
               'e_it_kwh', 'queued', 'sla_violations')


@dataclass(frozen=True)
class SimulationConfig:
    group_size: int = 16
    max_utilization: float = 0.95
    power_off_empty_nodes: bool = False
    queue_delay_s: float = None
    check_invariants: bool = True

    def __post_init__(self):
        if self.group_size < 1:
            raise ScenarioError(['simulation: group_size must be >= 1'])
        if not 0 < self.max_utilization <= 1:
            raise ScenarioError(['simulation: max_utilization must be in (0, 1]'])

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ScenarioError(['simulation: unknown keys %s' % unknown])
        return cls(**data)


################################
#                              #
#  Node Layout                 #
#                              #
################################

class DatacenterLayout:
    """
    Per-node arrays of one datacenter, ordered by (node type, index) in the
    order the datacenter lists its node types.
    """

    def __init__(self, datacenter, node_types, models, max_utilization=0.95):
        self.datacenter = datacenter
        names = list(datacenter.node_counts)
        counts = [datacenter.node_counts[name] for name in names]
        types = [node_types[name] for name in names]
        self.type_names = tuple(names)
        self.type_index = np.repeat(np.arange(len(types)), counts)
        idx = self.type_index

        self.capacity_gb = np.array([t.mem_total_gb for t in types])[idx]
        self.tdp_kw = np.array([t.tdp_kw for t in types])[idx]
        self.exec_s = np.array([[m.exec_ms_per_token[t.gpu_kind] / 1000. for m in models]
                                for t in types]).reshape(len(types), len(models))[idx]
        self.load_s = np.array([[m.mem_footprint_gb / t.bandwidth_gbps for m in models]
                                for t in types]).reshape(len(types), len(models))[idx]
        self.mem_footprint_gb = np.array([m.mem_footprint_gb for m in models])

        self.idle_pstate = np.array([t.pstate_fractions[0] for t in types])[idx]
        active = [t.pstate_fractions[1:] or t.pstate_fractions for t in types]
        width = max(len(a) for a in active)
        table = np.full((len(types), width), np.inf)
        for i, a in enumerate(active):
            table[i, :len(a)] = a
        self._active_pstates = table[idx]
        self._max_pstate = np.array([max(a) for a in active])[idx]

        self.n_nodes = len(idx)
        available = int(np.floor(max_utilization * self.n_nodes + 1e-9))
        # a non-empty site always keeps one node available
        self.n_available = min(self.n_nodes, max(1, available))

    def __repr__(self):
        return 'DatacenterLayout(%s, nodes=%i, available=%i)' % (
            self.datacenter.id, self.n_nodes, self.n_available)

    def active_pstate(self, utilization):
        """Lowest non-idle p-state whose fraction covers the memory utilization."""
        ok = self._active_pstates >= utilization[:, None]
        chosen = np.where(ok, self._active_pstates, np.inf).min(axis=1)
        return np.where(np.isfinite(chosen), chosen, self._max_pstate)


def round_robin_groups(caps, n_groups):
    """
    Deals n_groups groups one at a time over the nodes in order, skipping
    nodes that reached their cap. Returns groups per node.
    """
    caps = np.asarray(caps, dtype=np.int64)
    if n_groups <= 0 or caps.size == 0:
        return np.zeros_like(caps)
    if caps.sum() <= n_groups:
        return caps.copy()
    lo, hi = 1, int(caps.max())
    while lo < hi:
        mid = (lo + hi) // 2
        if np.minimum(caps, mid).sum() >= n_groups:
            hi = mid
        else:
            lo = mid + 1
    alloc = np.minimum(caps, lo - 1)
    rem = n_groups - int(alloc.sum())
    alloc[np.flatnonzero(caps >= lo)[:rem]] += 1
    return alloc


def integer_quotas(counts, fractions):
    """
    Splits integer counts (...) along the last axis of fractions (..., D)
    with largest-remainder rounding; totals are conserved exactly.
    """
    counts = np.asarray(counts, dtype=np.int64)
    raw = counts[..., None] * fractions
    base = np.floor(raw).astype(np.int64)
    rem = np.maximum(counts - base.sum(axis=-1), 0)
    order = np.argsort(-(raw - base), axis=-1, kind='stable')
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order,
                      np.broadcast_to(np.arange(raw.shape[-1]), order.shape), axis=-1)
    return base + (ranks < rem[..., None])


def _split_served(total, demand):
    """Largest-remainder split of `total` served requests over a demand row."""
    demand = np.asarray(demand, dtype=np.int64)
    d_sum = int(demand.sum())
    if d_sum == 0 or total <= 0:
        return np.zeros_like(demand)
    if total >= d_sum:
        return demand.copy()
    return integer_quotas(np.int64(total), demand / d_sum)


################################
#                              #
#  State and Results           #
#                              #
################################

@dataclass(frozen=True, eq=False)
class EnvState:
    """
    Everything the scheduler sees at the start of an epoch: residency per
    datacenter node (N, M), the carried queue (M, R, D), the intensity and
    pricing snapshot and the workload forecast.
    """
    epoch: int
    resident: tuple
    queue: np.ndarray
    queue_tokens: np.ndarray
    ci: np.ndarray
    gi: np.ndarray
    tou: np.ndarray
    cop: np.ndarray
    availability: np.ndarray
    forecast: np.ndarray = None

    def with_forecast(self, forecast):
        return replace(self, forecast=np.asarray(forecast, dtype=float))

    @property
    def warm_fraction(self):
        """Share of nodes holding each model, shaped (D, M)."""
        return np.array([r.mean(axis=0) if len(r) else np.zeros(r.shape[1])
                         for r in self.resident])

    @property
    def n_queued(self):
        return int(self.queue.sum())


@dataclass(frozen=True, eq=False)
class EpochResult:
    epoch: int
    metrics: MetricsVector
    allocations: tuple
    datacenter_metrics: tuple
    energy: tuple
    sla_violations: np.ndarray
    utilization: np.ndarray
    mean_ttft_s: float
    idle_fraction: float

    @property
    def total_sla_violations(self):
        return int(self.sla_violations.sum())

    @property
    def n_queued(self):
        return int(sum(a.n_queued for a in self.allocations))

    def rows(self):
        rows = []
        for alloc, metrics, energy, violations in zip(self.allocations,
                                                      self.datacenter_metrics,
                                                      self.energy,
                                                      self.sla_violations):
            row = {'epoch': self.epoch, 'dc': alloc.datacenter_id}
            row.update(metrics.to_dict())
            row['e_it_kwh'] = energy.it
            row['queued'] = alloc.n_queued
            row['sla_violations'] = int(violations)
            rows.append(row)
        return rows


################################
#                              #
#  Simulator Class             #
#                              #
################################

class Simulator:
    """
    Applies plans to a Scenario. `simulate` and `evaluate_plan` are pure and
    may run concurrently over one shared EnvState; `apply_plan` advances the
    environment and has a single caller per run.
    """

    def __init__(self, scenario, config=None, series_offset=0):
        self.scenario = scenario
        if config is None:
            config = SimulationConfig.from_dict(scenario.simulation)
        self.config = config
        self.series_offset = int(series_offset)
        self.layouts = [DatacenterLayout(dc, scenario.node_types, scenario.models,
                                         config.max_utilization)
                        for dc in scenario.datacenters]
        self.net_ms = latency_table(scenario.datacenters, scenario.network)
        if config.queue_delay_s is None:
            self.queue_delay_s = scenario.epoch_hours * SECONDS_PER_HOUR
        else:
            self.queue_delay_s = float(config.queue_delay_s)
        self._kv_per_token_gb = np.array([m.kv_per_token_mb / 1000. for m in scenario.models])

    def __repr__(self):
        return 'Simulator(%r)' % self.scenario

    @property
    def n_nodes(self):
        return sum(layout.n_nodes for layout in self.layouts)

    def series_epoch(self, epoch):
        return epoch - self.series_offset

    def initial_state(self, epoch=0):
        M, R, D = self.scenario.plan_shape
        resident = tuple(np.zeros((layout.n_nodes, M), dtype=bool)
                         for layout in self.layouts)
        return self._state(epoch, resident, np.zeros((M, R, D), dtype=np.int64),
                           np.zeros((M, R, D)))

    def _state(self, epoch, resident, queue, queue_tokens):
        e = self.series_epoch(epoch)
        dcs = self.scenario.datacenters
        return EnvState(epoch=epoch, resident=resident, queue=queue,
                        queue_tokens=queue_tokens,
                        ci=np.array([dc.ci(e) for dc in dcs]),
                        gi=np.array([dc.gi_l_per_kwh for dc in dcs]),
                        tou=np.array([dc.tou(e) for dc in dcs]),
                        cop=np.array([dc.cop for dc in dcs]),
                        availability=np.array([layout.n_available
                                               for layout in self.layouts]))

    def simulate(self, state, workload, plan):
        """Returns (EpochResult, next EnvState) without touching `state`."""
        scenario = self.scenario
        if plan.shape != scenario.plan_shape:
            raise PlanError('plan shape %s does not match scenario %s' %
                            (plan.shape, scenario.plan_shape))
        if workload.epoch_index != state.epoch:
            raise SimulationError('workload epoch %i does not match state epoch %i' %
                                  (workload.epoch_index, state.epoch))

        counts, out_tokens, _ = workload.to_arrays(scenario.model_ids, scenario.regions)
        routed = integer_quotas(counts, plan.routing)
        series_epoch = self.series_epoch(state.epoch)

        allocations, dc_metrics, energies, residents = [], [], [], []
        violations = np.zeros(scenario.n_datacenters, dtype=np.int64)
        utilization = np.zeros(scenario.n_datacenters)
        next_queue = np.zeros_like(state.queue)
        next_tokens = np.zeros_like(state.queue_tokens)
        ttft_total, n_requests, n_idle = 0., 0, 0

        for d, (dc, layout) in enumerate(zip(scenario.datacenters, self.layouts)):
            prev = state.queue[:, :, d]
            new = routed[:, :, d]
            n = prev.sum(axis=1) + new.sum(axis=1)
            token_sum = (prev * state.queue_tokens[:, :, d]).sum(axis=1) + \
                (new * out_tokens).sum(axis=1)
            tokens = np.where(n > 0, token_sum / np.maximum(n, 1), 0.)

            alloc, resident = self._balance(layout, state.resident[d], prev, new,
                                            tokens, self.net_ms[:, d], dc.id)
            energy = datacenter_energy(alloc, dc, scenario.epoch_hours, scenario.constants)
            water = water_usage(energy, dc, scenario.constants)
            carbon = carbon_emissions(energy, water, dc, series_epoch, scenario.constants)
            ttft, _ = epoch_ttft(alloc)
            metrics = MetricsVector(ttft, carbon.tot, water.tot,
                                    energy.tot * dc.tou(series_epoch))

            allocations.append(alloc)
            dc_metrics.append(metrics)
            energies.append(energy)
            residents.append(resident)
            with np.errstate(invalid='ignore'):
                violations[d] = int(np.sum(group_ttft(alloc) > scenario.sla_s))
            utilization[d] = alloc.n_active / layout.n_nodes
            next_queue[:, :, d] = alloc.queued
            next_tokens[:, :, d] = np.where(alloc.queued > 0, tokens[:, None], 0.)
            ttft_total += ttft
            n_requests += alloc.n_served + alloc.n_queued
            n_idle += layout.n_nodes - alloc.n_active

        total = MetricsVector.zero()
        for metrics in dc_metrics:
            total = total + metrics
        result = EpochResult(epoch=state.epoch, metrics=total,
                             allocations=tuple(allocations),
                             datacenter_metrics=tuple(dc_metrics),
                             energy=tuple(energies), sla_violations=violations,
                             utilization=utilization,
                             mean_ttft_s=ttft_total / n_requests if n_requests else 0.,
                             idle_fraction=n_idle / self.n_nodes)
        next_state = self._state(state.epoch + 1, tuple(residents), next_queue, next_tokens)
        return result, next_state

    def evaluate_plan(self, state, workload, plan):
        return self.simulate(state, workload, plan)[0].metrics

    def apply_plan(self, state, workload, plan):
        result, next_state = self.simulate(state, workload, plan)
        logger.debug('epoch %i: %s, queued=%i, sla_violations=%i', state.epoch,
                     result.metrics, result.n_queued, result.total_sla_violations)
        return result, next_state

    def _balance(self, layout, resident, prev, new, tokens, net_ms, dc_id):
        N, M = resident.shape
        g = self.config.group_size
        used = np.zeros(N)
        hosting = np.zeros((N, M), dtype=bool)
        node_groups = np.zeros(N, dtype=np.int64)
        load_s = np.zeros(M)
        exec_s = np.zeros(M)
        served = np.zeros_like(prev)
        queued = np.zeros_like(prev)

        for m in range(M):
            demand = int(prev[m].sum() + new[m].sum())
            if demand == 0:
                continue
            group_gb = g * tokens[m] * self._kv_per_token_gb[m]
            active = node_groups > 0
            # warm nodes first, then nodes already busy, then the rest
            rank = np.where(resident[:, m], 0, np.where(active, 1, 2))
            order = np.argsort(rank, kind='stable')
            inactive = ~active[order]
            budget = layout.n_available - int(active.sum())
            order = order[~inactive | (np.cumsum(inactive) <= budget)]

            free = layout.capacity_gb[order] - used[order] - layout.mem_footprint_gb[m]
            if group_gb > 0:
                caps = np.where(free >= 0, np.floor(free / group_gb + 1e-12), 0)
            else:
                caps = np.where(free >= 0, demand, 0)
            caps = np.minimum(caps, -(-demand // g)).astype(np.int64)
            groups = round_robin_groups(caps, -(-demand // g))

            requests = groups * g
            n_served = min(demand, int(requests.sum()))
            excess = int(requests.sum()) - n_served
            if excess > 0:
                top = np.flatnonzero(groups == groups.max())[-1]
                requests[top] -= excess

            nodes = order[requests > 0]
            r = requests[requests > 0]
            cold = ~resident[nodes, m]
            load_s[m] = float(np.sum(r * layout.load_s[nodes, m] * cold))
            exec_s[m] = float(np.sum(r * layout.exec_s[nodes, m]))
            used[nodes] += layout.mem_footprint_gb[m] + r * tokens[m] * self._kv_per_token_gb[m]
            hosting[nodes, m] = True
            node_groups[order] += groups

            from_prev = _split_served(n_served, prev[m])
            from_new = _split_served(n_served - int(from_prev.sum()), new[m])
            served[m] = from_prev + from_new
            queued[m] = prev[m] + new[m] - served[m]

        # idle residents stay loaded while they still fit
        keep = np.zeros_like(hosting)
        for m in range(M):
            fits = resident[:, m] & ~hosting[:, m] & \
                (used + layout.mem_footprint_gb[m] <= layout.capacity_gb)
            used[fits] += layout.mem_footprint_gb[m]
            keep[:, m] = fits
        next_resident = hosting | keep

        if self.config.check_invariants:
            if np.any(used > layout.capacity_gb * (1 + 1e-12)):
                worst = int(np.argmax(used - layout.capacity_gb))
                raise SimulationError('datacenter %s node %i: memory %.3f GB exceeds %.3f GB' %
                                      (dc_id, worst, used[worst], layout.capacity_gb[worst]))
            if np.any(served + queued != prev + new) or np.any(queued < 0):
                raise SimulationError('datacenter %s: request conservation violated' % dc_id)

        busy = node_groups > 0
        pstate = np.where(busy, layout.active_pstate(used / layout.capacity_gb),
                          layout.idle_pstate)
        if self.config.power_off_empty_nodes:
            pstate = np.where(~busy & ~next_resident.any(axis=1), 0., pstate)

        alloc = EpochAllocation(datacenter_id=dc_id, served=served, queued=queued,
                                load_s=load_s, exec_s=exec_s, net_ms=np.asarray(net_ms),
                                node_pstate=pstate, node_tdp_kw=layout.tdp_kw,
                                node_memory_gb=used, node_capacity_gb=layout.capacity_gb,
                                node_groups=node_groups, queue_delay_s=self.queue_delay_s)
        return alloc, next_resident


################################
#                              #
#  Objective                   #
#                              #
################################

class Normalizers:
    """
    Running per-metric reference values. The first observation sets them;
    later observations only raise them.
    """

    def __init__(self, values=None, floor=1e-9):
        self.floor = floor
        self._seen = values is not None
        self.values = np.ones(4) if values is None else \
            np.maximum(np.asarray(values, dtype=float), floor)

    def __repr__(self):
        return 'Normalizers(%s)' % np.array2string(self.values, precision=4)

    def update(self, metrics):
        values = np.maximum(_as_array(metrics), self.floor)
        self.values = values if not self._seen else np.maximum(self.values, values)
        self._seen = True
        return self

    def normalize(self, metrics):
        return _as_array(metrics) / self.values

    def copy(self):
        return Normalizers(self.values.copy(), self.floor) if self._seen \
            else Normalizers(floor=self.floor)


def _as_array(metrics):
    if isinstance(metrics, MetricsVector):
        return metrics.as_array()
    return np.asarray(metrics, dtype=float)


def weighted_objective(metrics, weights, normalizers):
    w = weights.as_array() if hasattr(weights, 'as_array') else np.asarray(weights)
    values = normalizers.values if isinstance(normalizers, Normalizers) \
        else np.asarray(normalizers, dtype=float)
    return float(np.dot(w, _as_array(metrics) / values))


################################
#                              #
#  Runs                        #
#                              #
################################

def warm_up(simulator, state, workloads, normalizers=None, predictor=None):
    """
    Serves `workloads` with uniform plans to load models, seed the
    normalizers and fill the predictor window. Returns the resulting state.
    """
    plan = SchedulingPlan.uniform(*simulator.scenario.plan_shape)
    for workload in workloads:
        result, state = simulator.apply_plan(state, workload, plan)
        if normalizers is not None:
            normalizers.update(result.metrics)
        if predictor is not None:
            predictor.update(workload)
    return state


@dataclass(eq=False)
class RunResult:
    label: dict
    rows: list
    epoch_metrics: list
    archive: ParetoFront
    sla_violations: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def totals(self):
        total = MetricsVector.zero()
        for metrics in self.epoch_metrics:
            total = total + metrics
        return total

    def summary(self):
        row = dict(self.label)
        row.update(self.totals.to_dict())
        row['sla_violations'] = self.sla_violations
        row['epochs'] = len(self.epoch_metrics)
        return row


class RunRecorder:
    """Collects per-epoch rows, executed metrics and the run's Pareto archive."""

    def __init__(self, **label):
        self.label = label
        self.rows = []
        self.epoch_metrics = []
        self.archive = ParetoFront()
        self.sla_violations = 0
        self.extras = {}

    def record(self, result, epoch):
        for row in result.rows():
            row['epoch'] = epoch
            row.update(self.label)
            self.rows.append(row)
        self.epoch_metrics.append(result.metrics)
        self.sla_violations += result.total_sla_violations
        self.offer(result.metrics, epoch, 'executed')

    def offer(self, metrics, epoch, source):
        label = dict(self.label)
        label.update({'epoch': epoch, 'source': source})
        self.archive.insert(metrics, label)

    def finish(self):
        return RunResult(label=dict(self.label), rows=self.rows,
                         epoch_metrics=self.epoch_metrics, archive=self.archive,
                         sla_violations=self.sla_violations, extras=self.extras)
