#! /usr/bin/env python
"""
core.py
Domain types shared by every other module: node and model profiles,
datacenters, epoch workloads, scheduling plans, metric vectors and the
validated Scenario. Scenario files are YAML; intensity series may be given
inline or as `epoch,value` CSV files next to the scenario file.
"""

import logging
import math
from dataclasses import MISSING, dataclass, field, fields

import numpy as np
import pandas as pd
import yaml

from greenroute.utils import METRIC_NAMES, resolve_relative, return_filename

logger = logging.getLogger(__name__)

GPU_KINDS = ('A100', 'H100')
EPOCH_HOURS = 0.25
DEFAULT_SLA_S = 2.0
SIMPLEX_TOL = 1e-9

SCHEMES = {
    'balanced': (0.25, 0.25, 0.25, 0.25),
    'min-latency': (1.0, 0.0, 0.0, 0.0),
    'min-carbon': (0.0, 1.0, 0.0, 0.0),
    'min-water': (0.0, 0.0, 1.0, 0.0),
    'min-cost': (0.0, 0.0, 0.0, 1.0),
}


################################
#                              #
#  Errors                      #
#                              #
################################

class GreenrouteError(Exception):
    pass


class ScenarioError(GreenrouteError):
    """Raised with the complete list of violated scenario invariants."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


class PlanError(GreenrouteError):
    pass


class SimulationError(GreenrouteError):
    pass


class TrainingError(GreenrouteError):

    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__('non-finite %s loss: %r' % (component, value))


class HypervolumeError(GreenrouteError):
    pass


def _reject_unknown_keys(cls, data):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ScenarioError(['%s: unknown keys %s' % (cls.__name__, unknown)])


def _missing_keys(cls, data, prefix, given=()):
    """Errors naming every required field of cls that data lacks."""
    return ['%s: missing key %s' % (prefix, f.name) for f in fields(cls)
            if f.default is MISSING and f.default_factory is MISSING
            and f.name not in given and f.name not in data]


def _require_keys(cls, data, prefix, given=()):
    missing = _missing_keys(cls, data, prefix, given)
    if missing:
        raise ScenarioError(missing)


################################
#                              #
#  Profiles                    #
#                              #
################################

@dataclass(frozen=True)
class PhysicalConstants:
    j_water_mj_per_l: float = 2.257
    ei_pot_kwh_per_l: float = 0.0004
    ei_waste_kwh_per_l: float = 0.0008
    cooling_multiplier: float = 3.0
    infra_fraction: float = 0.13

    def errors(self):
        return ['constants: %s must be > 0' % f.name
                for f in fields(self) if not getattr(self, f.name) > 0]

    @classmethod
    def from_dict(cls, data):
        data = data or {}
        _reject_unknown_keys(cls, data)
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class NodeType:
    name: str
    gpu_kind: str
    gpu_count: int
    mem_total_gb: float
    bandwidth_gbps: float
    tdp_kw: float
    pstate_fractions: tuple = (0.1, 0.4, 0.7, 1.0)

    def errors(self):
        errs = []
        prefix = 'node type %s' % self.name
        if self.gpu_kind not in GPU_KINDS:
            errs.append('%s: gpu_kind %r not in %s' % (prefix, self.gpu_kind, GPU_KINDS))
        if self.gpu_count not in (2, 4, 8):
            errs.append('%s: gpu_count must be 2, 4 or 8' % prefix)
        for name in ('mem_total_gb', 'bandwidth_gbps', 'tdp_kw'):
            if not getattr(self, name) > 0:
                errs.append('%s: %s must be > 0' % (prefix, name))
        p = self.pstate_fractions
        if len(p) == 0 or list(p) != sorted(p) or not all(0 < x <= 1 for x in p):
            errs.append('%s: pstate_fractions must be ascending in (0, 1]' % prefix)
        return errs

    @classmethod
    def from_dict(cls, name, data):
        data = dict(data)
        _reject_unknown_keys(cls, dict(data, name=name))
        _require_keys(cls, data, 'node type %s' % name, given=('name',))
        if 'pstate_fractions' in data:
            data['pstate_fractions'] = tuple(float(x) for x in data['pstate_fractions'])
        return cls(name=name, **data)


@dataclass(frozen=True)
class LLMModelProfile:
    id: str
    mem_footprint_gb: float
    kv_per_token_mb: float
    exec_ms_per_token: dict = field(hash=False)

    def errors(self, gpu_kinds=()):
        errs = []
        prefix = 'model %s' % self.id
        for name in ('mem_footprint_gb', 'kv_per_token_mb'):
            if not getattr(self, name) > 0:
                errs.append('%s: %s must be > 0' % (prefix, name))
        for kind, value in self.exec_ms_per_token.items():
            if not value > 0:
                errs.append('%s: exec_ms_per_token[%s] must be > 0' % (prefix, kind))
        for kind in gpu_kinds:
            if kind not in self.exec_ms_per_token:
                errs.append('%s: missing exec profile for GPU kind %s' % (prefix, kind))
        return errs

    def kv_gb(self, tokens):
        return tokens * self.kv_per_token_mb / 1000.

    @classmethod
    def from_dict(cls, model_id, data):
        _reject_unknown_keys(cls, dict(data, id=model_id))
        _require_keys(cls, data, 'model %s' % model_id, given=('id',))
        return cls(id=model_id,
                   mem_footprint_gb=float(data['mem_footprint_gb']),
                   kv_per_token_mb=float(data['kv_per_token_mb']),
                   exec_ms_per_token={k: float(v) for k, v in
                                      data['exec_ms_per_token'].items()})


@dataclass(frozen=True)
class NetworkParams:
    lambda_media_ms_per_km: float = 0.005
    sigma_hop_ms: float = 0.5
    region_coords: dict = field(default_factory=dict, hash=False)

    @property
    def regions(self):
        return tuple(self.region_coords)

    def errors(self):
        errs = []
        if self.lambda_media_ms_per_km < 0:
            errs.append('network: lambda_media_ms_per_km must be >= 0')
        if self.sigma_hop_ms < 0:
            errs.append('network: sigma_hop_ms must be >= 0')
        if not self.region_coords:
            errs.append('network: no origin regions')
        return errs

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        coords = data.pop('regions', data.pop('region_coords', {}))
        _reject_unknown_keys(cls, data)
        return cls(region_coords={k: (float(v[0]), float(v[1]))
                                  for k, v in coords.items()},
                   **{k: float(v) for k, v in data.items()})


################################
#                              #
#  Datacenter Class            #
#                              #
################################

@dataclass(frozen=True, eq=False)
class Datacenter:
    id: str
    location: tuple
    node_counts: dict
    cop: float
    gi_l_per_kwh: float
    ci_series: np.ndarray
    tou_series: np.ndarray
    phi: float = 0.2
    hop_counts: dict = field(default_factory=dict)

    def __repr__(self):
        return 'Datacenter(%s, nodes=%i, cop=%.2f)' % (self.id, self.n_nodes, self.cop)

    @property
    def n_nodes(self):
        return int(sum(self.node_counts.values()))

    def ci(self, epoch):
        return float(self.ci_series[epoch % len(self.ci_series)])

    def tou(self, epoch):
        return float(self.tou_series[epoch % len(self.tou_series)])

    def errors(self, epochs, node_types=None, regions=()):
        errs = []
        prefix = 'datacenter %s' % self.id
        if not self.cop > 0:
            errs.append('%s: cop must be > 0' % prefix)
        if not 0 <= self.phi < 1:
            errs.append('%s: phi must be in [0, 1)' % prefix)
        if self.gi_l_per_kwh < 0:
            errs.append('%s: gi_l_per_kwh must be >= 0' % prefix)
        if self.n_nodes <= 0:
            errs.append('%s: no nodes' % prefix)
        for name in ('ci_series', 'tou_series'):
            series = getattr(self, name)
            if len(series) < epochs:
                errs.append('%s: %s has %i values, needs %i' %
                            (prefix, name, len(series), epochs))
            if np.any(series < 0) or not np.all(np.isfinite(series)):
                errs.append('%s: %s must be finite and >= 0' % (prefix, name))
        if node_types is not None:
            for name, count in self.node_counts.items():
                if name not in node_types:
                    errs.append('%s: unknown node type %s' % (prefix, name))
                if count < 0:
                    errs.append('%s: negative count for %s' % (prefix, name))
        for region in regions:
            if region not in self.hop_counts:
                errs.append('%s: no hop count for region %s' % (prefix, region))
        return errs

    @classmethod
    def from_dict(cls, data, epochs, base_filename=None):
        data = dict(data)
        _reject_unknown_keys(cls, data)
        _require_keys(cls, data, 'datacenter %s' % data.get('id', '?'))
        for name in ('ci_series', 'tou_series'):
            data[name] = load_series(data[name], epochs, base_filename)
        data['location'] = tuple(float(x) for x in data['location'])
        data['node_counts'] = {k: int(v) for k, v in data['node_counts'].items()}
        data['hop_counts'] = {k: int(v) for k, v in data.get('hop_counts', {}).items()}
        for name in ('cop', 'gi_l_per_kwh', 'phi'):
            if name in data:
                data[name] = float(data[name])
        return cls(**data)


def load_series(value, epochs, base_filename=None):
    """A scalar repeats for every epoch, a list is taken as is and a string
    names an `epoch,value` CSV file."""
    if isinstance(value, str):
        filename = resolve_relative(value, base_filename)
        df = pd.read_csv(filename).sort_values('epoch')
        return df['value'].to_numpy(dtype=float)
    if np.isscalar(value):
        return np.full(epochs, float(value))
    return np.asarray(value, dtype=float)


def save_series(filename, series):
    pd.DataFrame({'epoch': np.arange(len(series)),
                  'value': np.asarray(series)}).to_csv(filename, index=False)


################################
#                              #
#  Workload                    #
#                              #
################################

@dataclass(frozen=True)
class WorkloadEntry:
    model_class: str
    origin_region: str
    request_count: int
    avg_output_tokens: float
    avg_input_tokens: float = 0.0


class EpochWorkload:
    """
    The requests arriving in one epoch, aggregated per (model_class,
    origin_region). Repeated pairs are merged with request-weighted token
    averages when the workload is turned into arrays.
    """

    def __init__(self, epoch_index, entries=()):
        self.epoch_index = int(epoch_index)
        self.entries = tuple(entries)
        self._arrays = {}
        self._total = None

    def __repr__(self):
        return 'EpochWorkload(epoch=%i, requests=%i)' % (self.epoch_index, self.total)

    def __len__(self):
        return len(self.entries)

    @property
    def total(self):
        if self._total is None:
            self._total = int(sum(e.request_count for e in self.entries))
        return self._total

    def errors(self, model_ids=None, regions=None):
        errs = []
        prefix = 'workload epoch %i' % self.epoch_index
        for e in self.entries:
            if e.request_count < 0:
                errs.append('%s: negative request count for %s/%s' %
                            (prefix, e.model_class, e.origin_region))
            if e.request_count > 0 and not (e.avg_output_tokens > 0):
                errs.append('%s: %s/%s has requests but no output tokens' %
                            (prefix, e.model_class, e.origin_region))
            if model_ids is not None and e.model_class not in model_ids:
                errs.append('%s: unknown model class %s' % (prefix, e.model_class))
            if regions is not None and e.origin_region not in regions:
                errs.append('%s: unknown origin region %s' % (prefix, e.origin_region))
        return errs

    def to_arrays(self, model_ids, regions):
        """Returns (counts, out_tokens, in_tokens), each shaped (M, R)."""
        key = (tuple(model_ids), tuple(regions))
        if key not in self._arrays:
            m_index = {m: i for i, m in enumerate(model_ids)}
            r_index = {r: i for i, r in enumerate(regions)}
            shape = (len(model_ids), len(regions))
            counts = np.zeros(shape, dtype=np.int64)
            out_sum = np.zeros(shape)
            in_sum = np.zeros(shape)
            for e in self.entries:
                i, j = m_index[e.model_class], r_index[e.origin_region]
                counts[i, j] += e.request_count
                out_sum[i, j] += e.request_count * e.avg_output_tokens
                in_sum[i, j] += e.request_count * e.avg_input_tokens
            with np.errstate(invalid='ignore', divide='ignore'):
                out_tokens = np.where(counts > 0, out_sum / np.maximum(counts, 1), 0.)
                in_tokens = np.where(counts > 0, in_sum / np.maximum(counts, 1), 0.)
            self._arrays[key] = (counts, out_tokens, in_tokens)
        return self._arrays[key]

    @classmethod
    def from_arrays(cls, epoch_index, model_ids, regions, counts,
                    out_tokens, in_tokens=None):
        if in_tokens is None:
            in_tokens = np.zeros_like(out_tokens)
        entries = []
        for i, m in enumerate(model_ids):
            for j, r in enumerate(regions):
                entries.append(WorkloadEntry(m, r, int(counts[i, j]),
                                             float(out_tokens[i, j]),
                                             float(in_tokens[i, j])))
        return cls(epoch_index, entries)


################################
#                              #
#  Plans and Metrics           #
#                              #
################################

class SchedulingPlan:
    """
    Routing fractions indexed (model_class, origin_region, datacenter).
    Every (model_class, origin_region) row lies on the probability simplex;
    anything else is rejected, never renormalized.
    """

    def __init__(self, routing):
        routing = np.array(routing, dtype=float)
        if routing.ndim != 3:
            raise PlanError('routing must be 3-dimensional, got shape %s' %
                            (routing.shape,))
        if not np.all(np.isfinite(routing)):
            raise PlanError('routing contains non-finite values')
        if np.any(routing < 0):
            raise PlanError('routing contains negative fractions (min %g)' %
                            routing.min())
        sums = routing.sum(axis=-1)
        worst = np.max(np.abs(sums - 1.)) if sums.size else 0.
        if worst > SIMPLEX_TOL:
            raise PlanError('routing rows must sum to 1 (worst deviation %g)' % worst)
        routing.flags.writeable = False
        self.routing = routing

    def __repr__(self):
        return 'SchedulingPlan(shape=%s)' % (self.shape,)

    def __eq__(self, other):
        return isinstance(other, SchedulingPlan) and \
            np.array_equal(self.routing, other.routing)

    @property
    def shape(self):
        return self.routing.shape

    @property
    def n_datacenters(self):
        return self.routing.shape[-1]

    def datacenter_mass(self, counts=None):
        """Share of requests routed to each datacenter, weighted by counts."""
        if counts is None:
            counts = np.ones(self.shape[:2])
        total = counts.sum()
        if total == 0:
            return np.full(self.n_datacenters, 1. / self.n_datacenters)
        return np.einsum('mr,mrd->d', counts, self.routing) / total

    @classmethod
    def uniform(cls, n_models, n_regions, n_datacenters):
        return cls(np.full((n_models, n_regions, n_datacenters), 1. / n_datacenters))

    @classmethod
    def pure(cls, n_models, n_regions, n_datacenters, datacenter_index):
        routing = np.zeros((n_models, n_regions, n_datacenters))
        routing[..., datacenter_index] = 1.
        return cls(routing)


@dataclass(frozen=True)
class MetricsVector:
    ttft_s: float
    carbon_kg: float
    water_l: float
    cost_usd: float

    def __post_init__(self):
        for name in METRIC_NAMES:
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError('%s must be finite and >= 0, got %r' % (name, value))

    def __add__(self, other):
        return MetricsVector.from_array(self.as_array() + other.as_array())

    def __getitem__(self, index):
        return getattr(self, METRIC_NAMES[index])

    def as_array(self):
        return np.array([self.ttft_s, self.carbon_kg, self.water_l, self.cost_usd])

    def to_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))

    @classmethod
    def zero(cls):
        return cls(0., 0., 0., 0.)


@dataclass(frozen=True)
class ObjectiveWeights:
    w: tuple = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        object.__setattr__(self, 'w', w)
        if len(w) != 4:
            raise ValueError('objective weights must have 4 entries, got %i' % len(w))
        if any(x < 0 for x in w) or abs(sum(w) - 1.) > SIMPLEX_TOL:
            raise ValueError('objective weights must be >= 0 and sum to 1, got %s' % (w,))

    def as_array(self):
        return np.array(self.w)

    @classmethod
    def for_scheme(cls, scheme):
        if scheme not in SCHEMES:
            raise ValueError('unknown scheme %r, expected one of %s' %
                             (scheme, sorted(SCHEMES)))
        return cls(SCHEMES[scheme])


################################
#                              #
#  Scenario Class              #
#                              #
################################

@dataclass(frozen=True, eq=False)
class Scenario:
    datacenters: tuple
    models: tuple
    node_types: dict
    network: NetworkParams
    epochs: int
    sla_s: float = DEFAULT_SLA_S
    epoch_hours: float = EPOCH_HOURS
    constants: PhysicalConstants = PhysicalConstants()
    simulation: dict = field(default_factory=dict)
    scheduler: dict = field(default_factory=dict)
    filename: str = None

    def __repr__(self):
        return 'Scenario(datacenters=%i, models=%i, regions=%i, epochs=%i)' % (
            self.n_datacenters, self.n_models, self.n_regions, self.epochs)

    @property
    def model_ids(self):
        return tuple(m.id for m in self.models)

    @property
    def regions(self):
        return self.network.regions

    @property
    def datacenter_ids(self):
        return tuple(d.id for d in self.datacenters)

    @property
    def n_models(self):
        return len(self.models)

    @property
    def n_regions(self):
        return len(self.regions)

    @property
    def n_datacenters(self):
        return len(self.datacenters)

    @property
    def plan_shape(self):
        return self.n_models, self.n_regions, self.n_datacenters

    def subset(self, n_datacenters):
        """The scenario restricted to its first n_datacenters sites."""
        return validate_scenario(self.datacenters[:n_datacenters], self.models,
                                 self.network, epochs=self.epochs,
                                 node_types=self.node_types, sla_s=self.sla_s,
                                 epoch_hours=self.epoch_hours,
                                 constants=self.constants,
                                 simulation=self.simulation,
                                 scheduler=self.scheduler)


def validate_scenario(datacenters, models, network, workload=None, epochs=96,
                      node_types=None, weights=None, sla_s=DEFAULT_SLA_S,
                      epoch_hours=EPOCH_HOURS, constants=None,
                      simulation=None, scheduler=None, filename=None):
    """
    Checks every scenario invariant and returns a frozen Scenario. All
    violations are collected and raised together as a ScenarioError.
    """
    errors = []
    datacenters = tuple(datacenters)
    models = tuple(models)
    constants = constants or PhysicalConstants()
    if node_types is None:
        node_types = {}

    if not datacenters:
        errors.append('no datacenters')
    if not models:
        errors.append('no models')
    if epochs < 1:
        errors.append('epochs must be >= 1')
    if not sla_s > 0:
        errors.append('sla_s must be > 0')
    if not epoch_hours > 0:
        errors.append('epoch_hours must be > 0')

    ids = [d.id for d in datacenters]
    if len(set(ids)) != len(ids):
        errors.append('duplicate datacenter ids')
    model_ids = [m.id for m in models]
    if len(set(model_ids)) != len(model_ids):
        errors.append('duplicate model ids')

    errors += constants.errors()
    errors += network.errors()
    for node_type in node_types.values():
        errors += node_type.errors()

    used_kinds = sorted({node_types[name].gpu_kind
                         for d in datacenters for name in d.node_counts
                         if name in node_types})
    for model in models:
        errors += model.errors(used_kinds)
    for dc in datacenters:
        errors += dc.errors(epochs, node_types, network.regions)

    if workload is not None:
        for epoch_workload in workload:
            errors += epoch_workload.errors(set(model_ids), set(network.regions))

    if weights is not None:
        try:
            weights = weights if isinstance(weights, ObjectiveWeights) \
                else ObjectiveWeights(tuple(weights))
        except (ValueError, TypeError) as exc:
            errors.append('weights malformed: %s' % exc)

    if errors:
        raise ScenarioError(errors)

    logger.debug('validated scenario: %i datacenters, %i models',
                 len(datacenters), len(models))
    return Scenario(datacenters=datacenters, models=models,
                    node_types=dict(node_types), network=network,
                    epochs=int(epochs), sla_s=float(sla_s),
                    epoch_hours=float(epoch_hours), constants=constants,
                    simulation=dict(simulation or {}),
                    scheduler=dict(scheduler or {}), filename=filename)


def scenario_from_dict(data, filename=None):
    data = dict(data)
    known = {'epochs', 'sla_s', 'epoch_hours', 'constants', 'network',
             'node_types', 'models', 'datacenters', 'simulation', 'scheduler'}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ScenarioError(['scenario: unknown sections %s' % unknown])

    epochs = int(data.get('epochs', 96))
    missing = []
    for name, spec in (data.get('node_types') or {}).items():
        missing += _missing_keys(NodeType, spec, 'node type %s' % name, given=('name',))
    for name, spec in (data.get('models') or {}).items():
        missing += _missing_keys(LLMModelProfile, spec, 'model %s' % name, given=('id',))
    for spec in data.get('datacenters') or []:
        missing += _missing_keys(Datacenter, spec, 'datacenter %s' % spec.get('id', '?'))
    if missing:
        raise ScenarioError(missing)
    node_types = {name: NodeType.from_dict(name, spec)
                  for name, spec in (data.get('node_types') or {}).items()}
    models = [LLMModelProfile.from_dict(name, spec)
              for name, spec in (data.get('models') or {}).items()]
    datacenters = [Datacenter.from_dict(spec, epochs, filename)
                   for spec in (data.get('datacenters') or [])]
    return validate_scenario(datacenters, models,
                             NetworkParams.from_dict(data.get('network')),
                             epochs=epochs, node_types=node_types,
                             sla_s=float(data.get('sla_s', DEFAULT_SLA_S)),
                             epoch_hours=float(data.get('epoch_hours', EPOCH_HOURS)),
                             constants=PhysicalConstants.from_dict(data.get('constants')),
                             simulation=data.get('simulation'),
                             scheduler=data.get('scheduler'),
                             filename=filename)


def load_scenario(filename):
    filename = return_filename(filename)
    with open(filename, 'r') as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ScenarioError(['%s: expected a mapping at the top level' % filename])
    return scenario_from_dict(data, filename)
