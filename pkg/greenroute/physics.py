#! /usr/bin/env python
"""
physics.py
Memory, latency, energy, cost, water and carbon models of a datacenter
epoch. Every function here is pure.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from astropy import units as u
from astropy.coordinates import angular_separation

from greenroute.core import PhysicalConstants, ScenarioError

EARTH_RADIUS_KM = 6371.0088
KWH_TO_MJ = (1 * u.kW * u.hour).to(u.MJ).value
SECONDS_PER_HOUR = (1 * u.hour).to(u.s).value


class Energy(NamedTuple):
    it: float
    cool: float
    infra: float
    tot: float


class Water(NamedTuple):
    evap: float
    blow: float
    grid: float
    tot: float


class Carbon(NamedTuple):
    grid: float
    water: float
    tot: float


@dataclass(frozen=True, eq=False)
class EpochAllocation:
    """
    What one datacenter did during one epoch. Request arrays are shaped
    (M, R); latency totals are per model and summed over the served
    requests; node arrays have one entry per node.
    """
    datacenter_id: str
    served: np.ndarray
    queued: np.ndarray
    load_s: np.ndarray
    exec_s: np.ndarray
    net_ms: np.ndarray
    node_pstate: np.ndarray
    node_tdp_kw: np.ndarray
    node_memory_gb: np.ndarray
    node_capacity_gb: np.ndarray
    node_groups: np.ndarray
    queue_delay_s: float = 900.

    @property
    def n_served(self):
        return int(self.served.sum())

    @property
    def n_queued(self):
        return int(self.queued.sum())

    @property
    def n_active(self):
        return int(np.count_nonzero(self.node_groups))

    @property
    def n_nodes(self):
        return len(self.node_groups)


################################
#                              #
#  Memory and Latency          #
#                              #
################################

def node_memory_usage(resident_models, request_groups):
    """
    Memory held on one node (GB): the weights of every resident model plus
    the KV cache of every request.

    Args:
        resident_models : iterable of LLMModelProfile
        request_groups : iterable of (LLMModelProfile, n_requests, tokens)
    """
    weights = sum(m.mem_footprint_gb for m in resident_models)
    kv = sum(n * model.kv_gb(tokens) for model, n, tokens in request_groups)
    return float(weights + kv)


def weight_load_latency(model, node, resident=False):
    if resident:
        return 0.
    return model.mem_footprint_gb / node.bandwidth_gbps


def great_circle_km(a, b):
    """Great-circle distance between two (lat, lon) pairs in degrees."""
    sep = angular_separation(a[1] * u.deg, a[0] * u.deg, b[1] * u.deg, b[0] * u.deg)
    return float(sep.to(u.rad).value * EARTH_RADIUS_KM)


def link_latency_ms(dist_km, hops, network):
    return dist_km * network.lambda_media_ms_per_km + hops * network.sigma_hop_ms


def network_latency(origin_region, datacenter, network):
    """One-way latency (ms) from an origin region to a datacenter."""
    if origin_region not in datacenter.hop_counts:
        raise ScenarioError(['datacenter %s: no hop count for region %s' %
                             (datacenter.id, origin_region)])
    if origin_region not in network.region_coords:
        raise ScenarioError(['network: no coordinates for region %s' % origin_region])
    dist = great_circle_km(network.region_coords[origin_region], datacenter.location)
    return link_latency_ms(dist, datacenter.hop_counts[origin_region], network)


def latency_table(datacenters, network):
    """One-way latencies (ms) shaped (R, D)."""
    return np.array([[network_latency(r, d, network) for d in datacenters]
                     for r in network.regions])


def epoch_ttft(allocation):
    """
    Returns (LA_tot, mean per-request TTFT) in seconds. Served requests pay
    weight loading, the round trip and one output token of execution;
    queued requests pay the queue delay.
    """
    served = allocation.served
    n_requests = served.sum() + allocation.queued.sum()
    if n_requests == 0:
        return 0., 0.
    net_s = 2. * allocation.net_ms / 1000.
    total = allocation.load_s.sum() + allocation.exec_s.sum() + \
        float((served * net_s[None, :]).sum()) + \
        allocation.queued.sum() * allocation.queue_delay_s
    return float(total), float(total / n_requests)


def group_ttft(allocation):
    """Mean TTFT per (model, region) group; NaN where there are no requests."""
    served = allocation.served
    queued = allocation.queued
    per_model = served.sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        service = np.where(per_model > 0,
                           (allocation.load_s + allocation.exec_s) / np.maximum(per_model, 1),
                           0.)
        total = served * (service[:, None] + 2. * allocation.net_ms[None, :] / 1000.) + \
            queued * allocation.queue_delay_s
        n = served + queued
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


################################
#                              #
#  Energy, Cost, Water, Carbon #
#                              #
################################

def energy_breakdown(e_it, cop, constants=PhysicalConstants()):
    e_cool = constants.cooling_multiplier * e_it / cop
    e_infra = constants.infra_fraction * e_it
    return Energy(float(e_it), float(e_cool), float(e_infra),
                  float(e_it + e_cool + e_infra))


def datacenter_energy(allocation, datacenter, t_e, constants=PhysicalConstants()):
    """(E_IT, E_cool, E_infra, E_tot) in kWh for one datacenter epoch."""
    e_it = float(np.dot(allocation.node_pstate, allocation.node_tdp_kw)) * t_e
    return energy_breakdown(e_it, datacenter.cop, constants)


def energy_cost(e_tot, tou):
    """Cost in USD of per-datacenter energies at their time-of-use prices."""
    return float(np.dot(np.atleast_1d(e_tot), np.atleast_1d(tou)))


def water_usage(energy, datacenter, constants=PhysicalConstants()):
    """(G_E, G_blow, G_grid, G_tot) in liters."""
    h_cool_mj = energy.it * KWH_TO_MJ
    evap = h_cool_mj / constants.j_water_mj_per_l
    blow = evap / (1. - datacenter.phi)
    grid = energy.tot * datacenter.gi_l_per_kwh
    return Water(evap, blow, grid, evap + blow + grid)


def carbon_emissions(energy, water, datacenter, epoch, constants=PhysicalConstants()):
    """(Z_grid, Z_G, Z_tot) in kg CO2 for one datacenter epoch."""
    ci = datacenter.ci(epoch)
    z_grid = ci * energy.tot
    z_pot = (water.blow + water.evap) * constants.ei_pot_kwh_per_l
    z_waste = water.grid * constants.ei_waste_kwh_per_l
    z_water = (z_pot + z_waste) * ci
    return Carbon(z_grid, z_water, z_grid + z_water)
