#! /usr/bin/env python
"""
utils.py
"""

import os

METRIC_NAMES = ('ttft_s', 'carbon_kg', 'water_l', 'cost_usd')


def return_filename(filename):
    if type(filename) != str:
        try:
            filename = filename.decode()
        except AttributeError:
            pass

    if filename is None:
        raise FileNotFoundError(filename)

    return str(filename)


def return_metrics_filename(out_dir, label):
    return _return_output_filename(out_dir, label, 'metrics')


def return_pareto_filename(out_dir, label):
    return _return_output_filename(out_dir, label, 'pareto')


def return_series_filename(out_dir, datacenter_id, series):
    return os.path.join(out_dir, '%s_%s.csv' % (datacenter_id, series))


def _return_output_filename(out_dir, label, kind):
    label = label.replace('/', '_').replace(' ', '_')
    return os.path.join(out_dir, '%s.%s.csv' % (label, kind))


def resolve_relative(path, base_filename):
    """Resolves path against the directory holding base_filename."""
    path = return_filename(path)
    if os.path.isabs(path) or base_filename is None:
        return path
    return os.path.join(os.path.dirname(os.path.abspath(base_filename)), path)
