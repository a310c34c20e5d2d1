import numpy as np
import pytest

from conftest import make_datacenter, node_type, small_model
from greenroute.core import NetworkParams, PhysicalConstants, ScenarioError
from greenroute.physics import Energy, EpochAllocation, carbon_emissions, \
    datacenter_energy, energy_breakdown, energy_cost, epoch_ttft, great_circle_km, \
    group_ttft, link_latency_ms, network_latency, node_memory_usage, water_usage, \
    weight_load_latency

NETWORK = NetworkParams(0.005, 0.5, {'r0': (0., 0.)})


def allocation(served=((1,),), queued=((0,),), load_s=(0.,), exec_s=(0.,), net_ms=(0.,),
               pstate=(1.,), tdp=(1.,)):
    n = len(pstate)
    return EpochAllocation(datacenter_id='dc0', served=np.array(served),
                           queued=np.array(queued), load_s=np.array(load_s),
                           exec_s=np.array(exec_s), net_ms=np.array(net_ms),
                           node_pstate=np.array(pstate), node_tdp_kw=np.array(tdp),
                           node_memory_gb=np.zeros(n), node_capacity_gb=np.full(n, 160.),
                           node_groups=np.ones(n, dtype=int))


def test_node_memory_usage():
    model = small_model()
    assert node_memory_usage([model], [(model, 2, 100)]) == pytest.approx(14.1)
    assert node_memory_usage([], []) == 0.
    big = small_model('big', footprint=140.)
    assert node_memory_usage([model, big], []) == pytest.approx(154.)


def test_weight_load_latency():
    node = node_type(bandwidth=25.)
    assert weight_load_latency(small_model(), node) == pytest.approx(0.56)
    assert weight_load_latency(small_model(), node, resident=True) == 0.
    assert weight_load_latency(small_model(footprint=140.), node) == pytest.approx(5.6)


def test_link_latency():
    assert link_latency_ms(1000., 3, NETWORK) == pytest.approx(6.5)
    assert link_latency_ms(0., 0, NETWORK) == 0.
    assert link_latency_ms(2000., 0, NETWORK) == pytest.approx(2 * link_latency_ms(1000., 0, NETWORK))


def test_network_latency_uses_great_circle_distance():
    dc = make_datacenter('dc0', location=(0., 10.), hops=3)
    dist = great_circle_km((0., 0.), (0., 10.))
    assert dist == pytest.approx(6371.0088 * np.radians(10.))
    assert network_latency('r0', dc, NETWORK) == pytest.approx(dist * 0.005 + 1.5)


def test_network_latency_missing_hops():
    dc = make_datacenter('dc0', regions=('r1',))
    with pytest.raises(ScenarioError):
        network_latency('r0', dc, NETWORK)


def test_epoch_ttft_single_request():
    alloc = allocation(load_s=(0.56,), exec_s=(0.030,), net_ms=(6.5,))
    total, mean = epoch_ttft(alloc)
    assert total == pytest.approx(0.603)
    assert mean == pytest.approx(0.603)


def test_epoch_ttft_empty_and_warm():
    assert epoch_ttft(allocation(served=((0,),))) == (0., 0.)
    alloc = allocation(served=((2,),), exec_s=(0.060,), net_ms=(6.5,))
    assert epoch_ttft(alloc)[0] == pytest.approx(2 * (2 * 0.0065 + 0.030))


def test_queued_requests_pay_queue_delay():
    alloc = allocation(served=((1,),), queued=((1,),), exec_s=(0.03,))
    total, mean = epoch_ttft(alloc)
    assert total == pytest.approx(0.03 + 900.)
    assert mean == pytest.approx(total / 2)
    assert group_ttft(alloc)[0, 0] == pytest.approx(total / 2)


def test_energy_breakdown():
    energy = energy_breakdown(100., 4.)
    assert energy == pytest.approx(Energy(100., 75., 13., 188.))
    assert energy_breakdown(100., 1e12).tot == pytest.approx(113.)


def test_idle_floor_energy():
    alloc = allocation(served=((0,),), pstate=(0.1, 0.1, 0.1), tdp=(1.3, 1.3, 2.0))
    dc = make_datacenter('dc0')
    assert datacenter_energy(alloc, dc, 0.25).it == pytest.approx(0.1 * 4.6 * 0.25)


def test_energy_cost():
    assert energy_cost(188., 0.10) == pytest.approx(18.8)
    assert energy_cost(0., 0.10) == 0.
    assert energy_cost([10., 10.], [0.1, 0.2]) == pytest.approx(1. + 2.)


def test_water_usage():
    dc = make_datacenter('dc0', gi=0.2)
    water = water_usage(Energy(100., 75., 13., 188.), dc)
    assert water.evap == pytest.approx(360. / 2.257)
    assert water.evap == pytest.approx(159.5, abs=0.05)
    assert water.blow == pytest.approx(199.4, abs=0.05)
    assert water.grid == pytest.approx(37.6)
    assert water.tot == water.evap + water.blow + water.grid
    assert water.tot == pytest.approx(396.5, abs=0.1)

    hydro = make_datacenter('dc1', gi=67.)
    assert water_usage(Energy(100., 75., 13., 188.), hydro).grid == pytest.approx(12596.)
    assert water_usage(Energy(0., 0., 0., 0.), dc).tot == 0.


def test_carbon_emissions():
    dc = make_datacenter('dc0', ci=0.4, gi=0.2)
    energy = Energy(100., 75., 13., 188.)
    water = water_usage(energy, dc)
    carbon = carbon_emissions(energy, water, dc, 0)
    assert carbon.grid == pytest.approx(75.2)
    assert carbon.water == pytest.approx(0.0695, abs=5e-4)
    assert carbon.tot == carbon.grid + carbon.water

    clean = make_datacenter('dc1', ci=0.)
    assert carbon_emissions(energy, water, clean, 0).tot == 0.
    dirty = make_datacenter('dc2', ci=0.8, gi=0.2)
    assert carbon_emissions(energy, water, dirty, 0).tot == pytest.approx(2 * carbon.tot)


def test_metrics_scale_with_units():
    # scaling every energy input by 1000 scales water and carbon by 1000
    dc = make_datacenter('dc0', ci=0.4, gi=0.2)
    small = energy_breakdown(1., 4.)
    large = energy_breakdown(1000., 4.)
    w_small, w_large = water_usage(small, dc), water_usage(large, dc)
    assert w_large.tot == pytest.approx(1000. * w_small.tot)
    assert carbon_emissions(large, w_large, dc, 0).tot == \
        pytest.approx(1000. * carbon_emissions(small, w_small, dc, 0).tot)


def test_monotone_in_pstate():
    dc = make_datacenter('dc0')
    low = datacenter_energy(allocation(pstate=(0.4,)), dc, 0.25)
    high = datacenter_energy(allocation(pstate=(0.7,)), dc, 0.25)
    assert high.tot > low.tot
    assert water_usage(high, dc).tot > water_usage(low, dc).tot


def test_physical_constants_defaults():
    constants = PhysicalConstants()
    assert constants.cooling_multiplier == 3.
    assert constants.infra_fraction == 0.13
    assert constants.errors() == []
    assert PhysicalConstants(j_water_mj_per_l=0.).errors()
