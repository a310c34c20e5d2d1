import numpy as np
import pytest

from greenroute.core import Datacenter, EpochWorkload, LLMModelProfile, NetworkParams, \
    NodeType, WorkloadEntry, validate_scenario
from greenroute.sim import Simulator


def node_type(name='A100x2', kind='A100', count=2, mem=160., bandwidth=25., tdp=1.3):
    return NodeType(name=name, gpu_kind=kind, gpu_count=count, mem_total_gb=mem,
                    bandwidth_gbps=bandwidth, tdp_kw=tdp)


def small_model(model_id='small', footprint=14., kv=0.5):
    return LLMModelProfile(id=model_id, mem_footprint_gb=footprint, kv_per_token_mb=kv,
                           exec_ms_per_token={'A100': 12., 'H100': 7.})


def make_datacenter(dc_id, ci=0.4, tou=0.1, gi=0.2, cop=4., nodes=4, epochs=8,
                    location=(0., 0.), regions=('r0',), node_name='A100x2', hops=2):
    return Datacenter(id=dc_id, location=location, node_counts={node_name: nodes},
                      cop=cop, gi_l_per_kwh=gi,
                      ci_series=np.full(epochs, float(ci)),
                      tou_series=np.full(epochs, float(tou)),
                      phi=0.2, hop_counts={r: hops for r in regions})


def make_scenario(ci=(0.5, 0.0), tou=(0.1, 0.1), gi=(0.2, 0.2), cop=(4., 4.), nodes=4,
                  epochs=8, models=None, regions=None, node_types=None, sla_s=2.0,
                  simulation=None, scheduler=None):
    regions = regions or {'r0': (0., 0.)}
    node_types = node_types or {'A100x2': node_type()}
    datacenters = [make_datacenter('dc%i' % d, ci=ci[d], tou=tou[d], gi=gi[d], cop=cop[d],
                                   nodes=nodes, epochs=epochs, location=(0., 5. * d),
                                   regions=tuple(regions))
                   for d in range(len(ci))]
    return validate_scenario(datacenters, models or [small_model()],
                             NetworkParams(region_coords=dict(regions)),
                             epochs=epochs, node_types=node_types, sla_s=sla_s,
                             simulation=simulation, scheduler=scheduler)


def make_workload(epoch, counts, tokens=100., model_ids=('small',), regions=('r0',)):
    counts = np.atleast_2d(counts)
    return EpochWorkload(epoch, [WorkloadEntry(m, r, int(counts[i, j]), tokens, 50.)
                                 for i, m in enumerate(model_ids)
                                 for j, r in enumerate(regions)])


@pytest.fixture
def scenario():
    return make_scenario()


@pytest.fixture
def simulator(scenario):
    return Simulator(scenario)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
