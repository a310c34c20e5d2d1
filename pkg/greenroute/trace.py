#! /usr/bin/env python
"""
trace.py
A sequence of epoch workloads makes up a trace, held in the Trace class.
Traces are read from and written to CSV, or synthesized from a few volume
patterns.
"""

import logging
import os

import numpy as np
import pandas as pd

from greenroute.core import EpochWorkload, WorkloadEntry
from greenroute.utils import return_filename

logger = logging.getLogger(__name__)

PATTERNS = ('diurnal', 'bursty', 'constant', 'step')
CSV_COLUMNS = ('epoch', 'model_class', 'origin_region', 'requests',
               'avg_in_tokens', 'avg_out_tokens')
DEFAULT_TOKENS = {'llama-7b': (512., 200.), 'llama-70b': (768., 250.)}
FALLBACK_TOKENS = (512., 256.)


################################
#                              #
#  Trace Class                 #
#                              #
################################

class Trace:
    """
    Epoch workloads in epoch order, with the model classes and origin
    regions they refer to.
    """

    def __init__(self, workloads, model_ids, regions, name='trace'):
        self.workloads = list(workloads)
        self.model_ids = tuple(model_ids)
        self.regions = tuple(regions)
        self.name = name

        self._volumes = None
        self._volume_median = None
        self._volume_max = None

    def __repr__(self):
        title = 'Trace: %s\n' % self.name
        title += 'N_epochs: %i\n' % len(self)
        if len(self):
            title += 'Median volume: %i\n' % self.volume_median
        return title

    def __len__(self):
        return len(self.workloads)

    def __getitem__(self, index):
        return self.workloads[index]

    def __iter__(self):
        return iter(self.workloads)

    @property
    def volumes(self):
        if self._volumes is None:
            self._volumes = np.array([w.total for w in self.workloads], dtype=np.int64)
        return self._volumes

    @property
    def volume_median(self):
        if self._volume_median is None:
            self._volume_median = float(np.median(self.volumes))
        return self._volume_median

    @property
    def volume_max(self):
        if self._volume_max is None:
            self._volume_max = int(self.volumes.max())
        return self._volume_max

    def series(self, model_class, origin_region):
        """Request counts of one (model_class, origin_region) series."""
        i = self.model_ids.index(model_class)
        j = self.regions.index(origin_region)
        return np.array([w.to_arrays(self.model_ids, self.regions)[0][i, j]
                         for w in self.workloads])

    def window(self, start, stop=None):
        return Trace(self.workloads[start:stop], self.model_ids, self.regions, self.name)

    def to_dataframe(self):
        rows = [{'epoch': w.epoch_index, 'model_class': e.model_class,
                 'origin_region': e.origin_region, 'requests': e.request_count,
                 'avg_in_tokens': e.avg_input_tokens,
                 'avg_out_tokens': e.avg_output_tokens}
                for w in self.workloads for e in w.entries]
        return pd.DataFrame(rows, columns=list(CSV_COLUMNS))

    def save(self, filename, overwrite=False):
        filename = return_filename(filename)
        if os.path.exists(filename) and not overwrite:
            print('%s already exists. Skipping.' % filename)
            return
        self.to_dataframe().to_csv(filename, index=False)
        print('---- Trace saved: %s' % filename)


def load_trace(filename, model_ids=None, regions=None):
    """Reads an `epoch,model_class,origin_region,requests,avg_in_tokens,
    avg_out_tokens` CSV. Missing epochs become empty workloads."""
    filename = return_filename(filename)
    df = pd.read_csv(filename)
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError('%s: missing columns %s' % (filename, missing))
    if model_ids is None:
        model_ids = tuple(pd.unique(df['model_class']))
    if regions is None:
        regions = tuple(pd.unique(df['origin_region']))

    first, last = int(df['epoch'].min()), int(df['epoch'].max())
    grouped = {int(e): g for e, g in df.groupby('epoch')}
    workloads = []
    for epoch in range(first, last + 1):
        g = grouped.get(epoch)
        entries = [] if g is None else [
            WorkloadEntry(str(r.model_class), str(r.origin_region), int(r.requests),
                          float(r.avg_out_tokens), float(r.avg_in_tokens))
            for r in g.itertuples(index=False)]
        workloads.append(EpochWorkload(epoch - first, entries))
    logger.info('loaded %i epochs from %s', len(workloads), filename)
    return Trace(workloads, model_ids, regions, os.path.basename(filename))


################################
#                              #
#  Synthetic Traces            #
#                              #
################################

def _largest_remainder(total, shares):
    shares = np.asarray(shares, dtype=float) / np.sum(shares)
    raw = total * shares
    base = np.floor(raw).astype(np.int64)
    rem = int(total - base.sum())
    base[np.argsort(-(raw - base), kind='stable')[:rem]] += 1
    return base


def diurnal_rates(epochs, base_volume, longitudes, amplitude=0.5, period=96, start=0):
    """
    Expected requests per (epoch, region): each region peaks at its local
    noon, offset by longitude, and the regions share base_volume equally.
    """
    e = np.arange(start, start + epochs)[:, None]
    phase = 2. * np.pi * (e / period + np.asarray(longitudes)[None, :] / 360.)
    per_region = base_volume / len(longitudes)
    return per_region * (1. + amplitude * np.sin(phase - np.pi / 2.))


def synth_trace(pattern, epochs, seed=0, model_ids=('llama-7b', 'llama-70b'),
                regions=None, region_longitudes=None, base_volume=10000,
                model_mix=None, amplitude=0.5, period=96, spike_probability=0.02,
                spike_scale=10., spike_shape=1.2, spike_cap=25.,
                step_from=None, step_to=None, step_epoch=None, token_jitter=0.1):
    """
    Returns a Trace of `epochs` workloads following `pattern`:

        constant : Poisson(base_volume) every epoch
        diurnal  : per-region sinusoid with a `period`-epoch day plus
                   Poisson noise
        bursty   : diurnal with Pareto-distributed spikes
        step     : noise-free step from step_from to step_to at step_epoch

    Requests are split over model classes by model_mix (default 0.7/0.3
    for two classes).
    """
    if pattern not in PATTERNS:
        raise ValueError('unknown trace pattern %r, expected one of %s' % (pattern, PATTERNS))
    rng = np.random.default_rng(seed)
    model_ids = tuple(model_ids)
    if regions is None:
        n_regions = 1 if region_longitudes is None else len(region_longitudes)
        regions = ['region-%i' % i for i in range(n_regions)]
    regions = tuple(regions)
    if region_longitudes is None:
        region_longitudes = np.linspace(-120., 120., len(regions))
    if model_mix is None:
        model_mix = (0.7, 0.3) if len(model_ids) == 2 else np.ones(len(model_ids))
    model_mix = np.asarray(model_mix, dtype=float) / np.sum(model_mix)
    R, M = len(regions), len(model_ids)

    if pattern == 'step':
        step_from = base_volume if step_from is None else step_from
        step_to = 2 * step_from if step_to is None else step_to
        step_epoch = epochs // 2 if step_epoch is None else step_epoch
        totals = np.where(np.arange(epochs) < step_epoch, step_from, step_to)
        counts = np.array([[_largest_remainder(n_r, model_mix)
                            for n_r in _largest_remainder(total, np.ones(R))]
                           for total in totals])
    else:
        if pattern == 'constant':
            rates = np.full((epochs, R), base_volume / R)
        else:
            rates = diurnal_rates(epochs, base_volume, region_longitudes, amplitude, period)
        if pattern == 'bursty':
            spikes = rng.random(epochs) < spike_probability
            multiplier = np.minimum(1. + spike_scale * rng.pareto(spike_shape, epochs), spike_cap)
            rates = rates * np.where(spikes, multiplier, 1.)[:, None]
        if pattern == 'constant':
            totals = rng.poisson(base_volume, epochs)
            per_region = np.array([rng.multinomial(n, np.full(R, 1. / R)) for n in totals])
        else:
            per_region = rng.poisson(rates)
        counts = np.array([[rng.multinomial(n, model_mix) for n in row]
                           for row in per_region])

    # counts is (E, R, M)
    tokens = np.array([DEFAULT_TOKENS.get(m, FALLBACK_TOKENS) for m in model_ids])
    workloads = []
    for e in range(epochs):
        if pattern == 'step' or token_jitter == 0:
            jitter = np.ones((M, 2))
        else:
            jitter = 1. + token_jitter * rng.uniform(-1., 1., (M, 2))
        entries = [WorkloadEntry(m, r, int(counts[e, j, i]),
                                 float(tokens[i, 1] * jitter[i, 1]),
                                 float(tokens[i, 0] * jitter[i, 0]))
                   for i, m in enumerate(model_ids) for j, r in enumerate(regions)]
        workloads.append(EpochWorkload(e, entries))
    logger.debug('synthesized %s trace: %i epochs, seed %i', pattern, epochs, seed)
    return Trace(workloads, model_ids, regions, '%s-%i' % (pattern, seed))


def trace_from_spec(spec, scenario, epochs, seed=0, base_volume=10000, longitudes=None):
    """`synthetic:PATTERN` or `csv:PATH`."""
    kind, _, value = spec.partition(':')
    if kind == 'synthetic':
        if longitudes is None:
            coords = scenario.network.region_coords
            longitudes = [coords[r][1] for r in scenario.regions]
        period = int(round(24. / scenario.epoch_hours))
        return synth_trace(value or 'diurnal', epochs, seed, scenario.model_ids,
                           scenario.regions, longitudes, base_volume, period=period)
    if kind == 'csv':
        return load_trace(value, scenario.model_ids, scenario.regions)
    raise ValueError("trace must be 'synthetic:PATTERN' or 'csv:PATH', got %r" % spec)
