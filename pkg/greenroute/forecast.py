#! /usr/bin/env python
"""
forecast.py
Next-epoch request volume forecasts from an exponentially weighted moving
average over a sliding window of past epochs.
"""

import logging
from collections import deque

import numpy as np

from greenroute.core import EpochWorkload

logger = logging.getLogger(__name__)


def ewma_weights(alpha, n):
    """Weights alpha*(1-alpha)**(k-1) for k = 1..n, most recent first."""
    return alpha * (1. - alpha) ** np.arange(n)


################################
#                              #
#  EwmaPredictor Class         #
#                              #
################################

class EwmaPredictor:
    """Forecasts one volume series."""

    def __init__(self, alpha=0.3, window=8):
        if not 0 < alpha <= 1:
            raise ValueError('alpha must be in (0, 1], got %r' % alpha)
        if window < 1:
            raise ValueError('window must be >= 1, got %r' % window)
        self.alpha = alpha
        self.window = window
        self.history = deque(maxlen=window)

    def __repr__(self):
        return 'EwmaPredictor(alpha=%g, window=%i, n=%i)' % (
            self.alpha, self.window, len(self.history))

    @property
    def cold_start(self):
        return len(self.history) == 0

    def predict(self):
        if self.cold_start:
            return 0.
        values = np.array(self.history)[::-1]
        w = ewma_weights(self.alpha, len(values))
        return float(np.dot(w, values) / w.sum())

    def update(self, observed):
        self.history.append(float(observed))
        return self


################################
#                              #
#  WorkloadPredictor Class     #
#                              #
################################

class WorkloadPredictor:
    """
    Independent EWMA forecasts for every (model_class, origin_region)
    series, kept as one (window, M, R) ring so a forecast is a single
    weighted sum.
    """

    def __init__(self, model_ids, regions, alpha=0.3, window=8):
        if not 0 < alpha <= 1:
            raise ValueError('alpha must be in (0, 1], got %r' % alpha)
        if window < 1:
            raise ValueError('window must be >= 1, got %r' % window)
        self.model_ids = tuple(model_ids)
        self.regions = tuple(regions)
        self.alpha = alpha
        self.window = window
        shape = (len(self.model_ids), len(self.regions))
        self._history = np.zeros((window,) + shape)
        self._n = 0
        self._head = 0
        self._out_tokens = np.zeros(shape)
        self._in_tokens = np.zeros(shape)

    def __repr__(self):
        return 'WorkloadPredictor(alpha=%g, window=%i, series=%i)' % (
            self.alpha, self.window, self._history[0].size)

    @property
    def cold_start(self):
        return self._n == 0

    def predict(self):
        """Forecast volumes shaped (M, R); zeros on a cold start."""
        if self.cold_start:
            return np.zeros(self._history.shape[1:])
        n = min(self._n, self.window)
        idx = (self._head - 1 - np.arange(n)) % self.window
        w = ewma_weights(self.alpha, n)
        return np.tensordot(w, self._history[idx], axes=1) / w.sum()

    def update(self, workload):
        counts, out_tokens, in_tokens = workload.to_arrays(self.model_ids, self.regions)
        self._history[self._head] = counts
        self._head = (self._head + 1) % self.window
        self._n += 1
        seen = counts > 0
        self._out_tokens = np.where(seen, out_tokens, self._out_tokens)
        self._in_tokens = np.where(seen, in_tokens, self._in_tokens)
        return self

    def forecast_workload(self, epoch_index):
        """The forecast as an EpochWorkload carrying the last seen token averages."""
        counts = np.rint(self.predict()).astype(np.int64)
        counts = np.where(self._out_tokens > 0, counts, 0)
        return EpochWorkload.from_arrays(epoch_index, self.model_ids, self.regions,
                                         counts, self._out_tokens, self._in_tokens)


def evaluate_predictor(volumes, alpha=0.3, window=8):
    """
    Replays a volume stream through an EwmaPredictor. Returns the mean
    absolute percentage error over epochs with a warm predictor and
    nonzero volume, and the matching accuracy (1 - MAPE).
    """
    predictor = EwmaPredictor(alpha, window)
    errors = []
    for observed in volumes:
        if not predictor.cold_start and observed > 0:
            errors.append(abs(predictor.predict() - observed) / observed)
        predictor.update(observed)
    mape = float(np.mean(errors)) if errors else float('nan')
    logger.debug('predictor alpha=%g window=%i: mape=%.4f over %i epochs',
                 alpha, window, mape, len(errors))
    return {'mape': mape, 'accuracy': 1. - mape, 'n': len(errors)}
