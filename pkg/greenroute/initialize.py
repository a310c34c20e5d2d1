#! /usr/bin/env python
"""
initialize.py
Generation of the standard scenario: up to twelve datacenter sites with
heterogeneous carbon, water and price profiles, six origin regions, six
node types and two model classes. The scenario can be built in memory or
written to a directory as a scenario YAML file plus per-datacenter
intensity CSVs.
"""

import argparse
import logging
import os
from dataclasses import asdict

import numpy as np
import yaml

from greenroute.core import EPOCH_HOURS, Datacenter, LLMModelProfile, NetworkParams, \
    NodeType, save_series, validate_scenario
from greenroute.physics import great_circle_km
from greenroute.utils import return_series_filename

logger = logging.getLogger(__name__)

# id: (lat, lon, mean CI kg/kWh, GI L/kWh, mean TOU $/kWh, COP)
DATACENTER_SITES = {
    'oregon': (45.6, -121.2, 0.12, 67.0, 0.07, 4.5),
    'virginia': (38.9, -77.4, 0.35, 1.9, 0.09, 3.5),
    'iowa': (41.6, -93.6, 0.40, 0.2, 0.08, 4.0),
    'singapore': (1.35, 103.8, 0.41, 1.9, 0.16, 2.8),
    'ireland': (53.3, -6.3, 0.30, 0.2, 0.22, 5.0),
    'tokyo': (35.7, 139.7, 0.46, 1.7, 0.20, 3.2),
    'quebec': (45.5, -73.6, 0.03, 67.0, 0.05, 5.2),
    'texas': (32.8, -96.8, 0.38, 0.2, 0.085, 3.0),
    'netherlands': (52.4, 4.9, 0.33, 1.8, 0.21, 4.6),
    'california': (37.4, -122.0, 0.22, 1.5, 0.19, 3.8),
    'finland': (60.6, 27.0, 0.08, 1.2, 0.12, 5.5),
    'sydney': (-33.9, 151.2, 0.66, 1.9, 0.17, 3.1),
}

ORIGIN_REGIONS = {
    'us-west': (37.8, -122.4),
    'us-east': (40.7, -74.0),
    'europe': (50.1, 8.7),
    'asia-east': (22.3, 114.2),
    'asia-south': (19.1, 72.9),
    'oceania': (-33.9, 151.2),
}

GPU_MEMORY_GB = 80.
GPU_BANDWIDTH_GBPS = {'A100': 25., 'H100': 50.}
GPU_TDP_KW = {'A100': 0.4, 'H100': 0.7}
NODE_OVERHEAD_KW = {'A100': 0.5, 'H100': 0.8}

MODEL_PROFILES = {
    'llama-7b': {'mem_footprint_gb': 14., 'kv_per_token_mb': 0.5,
                 'exec_ms_per_token': {'A100': 12., 'H100': 7.}},
    'llama-70b': {'mem_footprint_gb': 140., 'kv_per_token_mb': 0.33,
                  'exec_ms_per_token': {'A100': 45., 'H100': 25.}},
}


def standard_node_types():
    node_types = {}
    for kind in ('A100', 'H100'):
        for count in (2, 4, 8):
            name = '%sx%i' % (kind, count)
            node_types[name] = NodeType(
                name=name, gpu_kind=kind, gpu_count=count,
                mem_total_gb=count * GPU_MEMORY_GB,
                bandwidth_gbps=GPU_BANDWIDTH_GBPS[kind],
                tdp_kw=count * GPU_TDP_KW[kind] + NODE_OVERHEAD_KW[kind])
    return node_types


def hop_count(dist_km):
    return 2 + int(round(dist_km / 1500.))


def _local_hours(epochs, lon, epoch_hours):
    return (np.arange(epochs) * epoch_hours + lon / 15.) % 24.


def carbon_series(mean_ci, lon, epochs, epoch_hours=EPOCH_HOURS, solar_dip=0.3):
    """Carbon intensity that dips with solar output around local noon."""
    hours = _local_hours(epochs, lon, epoch_hours)
    solar = np.clip(np.cos(2. * np.pi * (hours - 12.) / 24.), 0., None)
    return mean_ci * (1. - solar_dip * solar)


def tou_series(mean_tou, lon, epochs, epoch_hours=EPOCH_HOURS, peak=0.4, off_peak=0.2):
    """Time-of-use price with a local evening peak and a cheap night."""
    hours = _local_hours(epochs, lon, epoch_hours)
    factor = np.ones(epochs)
    factor[(hours >= 17.) & (hours < 21.)] += peak
    factor[hours < 6.] -= off_peak
    return mean_tou * factor


def _datacenter(site_id, node_counts, epochs, epoch_hours):
    lat, lon, mean_ci, gi, mean_tou, cop = DATACENTER_SITES[site_id]
    hops = {r: hop_count(great_circle_km(coords, (lat, lon)))
            for r, coords in ORIGIN_REGIONS.items()}
    return Datacenter(id=site_id, location=(lat, lon), node_counts=node_counts,
                      cop=cop, gi_l_per_kwh=gi,
                      ci_series=carbon_series(mean_ci, lon, epochs, epoch_hours),
                      tou_series=tou_series(mean_tou, lon, epochs, epoch_hours),
                      phi=0.2, hop_counts=hops)


def standard_scenario(n_datacenters=8, epochs=96, nodes=1000, seed=0,
                      epoch_hours=EPOCH_HOURS, sla_s=2.0, simulation=None, scheduler=None):
    """
    The first n_datacenters sites of DATACENTER_SITES, each with `nodes`
    nodes spread evenly over the six node types; a seeded shuffle picks
    which types take the remainder at each site.
    """
    if not 1 <= n_datacenters <= len(DATACENTER_SITES):
        raise ValueError('n_datacenters must be in [1, %i]' % len(DATACENTER_SITES))
    rng = np.random.default_rng(seed)
    node_types = standard_node_types()
    names = list(node_types)

    datacenters = []
    for site_id in list(DATACENTER_SITES)[:n_datacenters]:
        per_type = np.full(len(names), nodes // len(names))
        per_type[rng.permutation(len(names))[:nodes % len(names)]] += 1
        counts = {name: int(n) for name, n in zip(names, per_type) if n}
        datacenters.append(_datacenter(site_id, counts, epochs, epoch_hours))

    models = [LLMModelProfile.from_dict(m, spec) for m, spec in MODEL_PROFILES.items()]
    network = NetworkParams(region_coords=dict(ORIGIN_REGIONS))
    return validate_scenario(datacenters, models, network, epochs=epochs,
                             node_types=node_types, sla_s=sla_s, epoch_hours=epoch_hours,
                             simulation=simulation, scheduler=scheduler)


def scenario_to_dict(scenario, series_files=None):
    """Plain-data form of a scenario; series_files maps (dc_id, 'ci'|'tou')
    to a CSV path used instead of the inline list."""
    series_files = series_files or {}
    data = {'epochs': scenario.epochs, 'sla_s': scenario.sla_s,
            'epoch_hours': scenario.epoch_hours,
            'constants': asdict(scenario.constants),
            'network': {'lambda_media_ms_per_km': scenario.network.lambda_media_ms_per_km,
                        'sigma_hop_ms': scenario.network.sigma_hop_ms,
                        'regions': {r: list(c) for r, c in
                                    scenario.network.region_coords.items()}},
            'node_types': {name: {'gpu_kind': t.gpu_kind, 'gpu_count': t.gpu_count,
                                  'mem_total_gb': t.mem_total_gb,
                                  'bandwidth_gbps': t.bandwidth_gbps,
                                  'tdp_kw': t.tdp_kw,
                                  'pstate_fractions': list(t.pstate_fractions)}
                           for name, t in scenario.node_types.items()},
            'models': {m.id: {'mem_footprint_gb': m.mem_footprint_gb,
                              'kv_per_token_mb': m.kv_per_token_mb,
                              'exec_ms_per_token': dict(m.exec_ms_per_token)}
                       for m in scenario.models},
            'datacenters': []}
    for dc in scenario.datacenters:
        data['datacenters'].append({
            'id': dc.id, 'location': list(dc.location),
            'node_counts': dict(dc.node_counts), 'cop': dc.cop,
            'gi_l_per_kwh': dc.gi_l_per_kwh, 'phi': dc.phi,
            'hop_counts': dict(dc.hop_counts),
            'ci_series': series_files.get((dc.id, 'ci'), [float(x) for x in dc.ci_series]),
            'tou_series': series_files.get((dc.id, 'tou'), [float(x) for x in dc.tou_series])})
    if scenario.simulation:
        data['simulation'] = dict(scenario.simulation)
    if scenario.scheduler:
        data['scheduler'] = dict(scenario.scheduler)
    return data


def write_standard_scenario(out_dir, n_datacenters=12, epochs=96, nodes=1000, seed=0,
                            overwrite=False):
    """Writes scenario.yaml and one ci/tou CSV per datacenter to out_dir.
    Returns the scenario file name."""
    os.makedirs(out_dir, exist_ok=True)
    scenario_file = os.path.join(out_dir, 'scenario.yaml')
    if os.path.exists(scenario_file) and not overwrite:
        print('%s already exists. Skipping.' % scenario_file)
        return scenario_file

    scenario = standard_scenario(n_datacenters, epochs, nodes, seed)
    series_files = {}
    for dc in scenario.datacenters:
        for series, values in (('ci', dc.ci_series), ('tou', dc.tou_series)):
            filename = return_series_filename(out_dir, dc.id, series)
            save_series(filename, values)
            series_files[(dc.id, series)] = os.path.basename(filename)
        print('---- Series saved: %s' % dc.id)

    with open(scenario_file, 'w') as f:
        yaml.safe_dump(scenario_to_dict(scenario, series_files), f, sort_keys=False)
    print('---- Scenario saved: %s' % scenario_file)
    return scenario_file


def main(argv=None):
    parser = argparse.ArgumentParser(description='Write the standard scenario.')
    parser.add_argument('--out-dir', type=str, default='scenario',
                        help='Directory for scenario.yaml and the series CSVs.')
    parser.add_argument('--datacenters', type=int, default=12,
                        help='Number of datacenter sites. Default is 12.')
    parser.add_argument('--epochs', type=int, default=96,
                        help='Length of the intensity series. Default is 96.')
    parser.add_argument('--nodes', type=int, default=1000,
                        help='Nodes per site. Default is 1000.')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--overwrite', action='store_true',
                        help='Replace existing files.')
    args = parser.parse_args(argv)
    write_standard_scenario(args.out_dir, args.datacenters, args.epochs, args.nodes,
                            args.seed, args.overwrite)


if __name__ == '__main__':
    main()
