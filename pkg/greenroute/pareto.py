#! /usr/bin/env python
"""
pareto.py
Non-dominated archives of metric vectors (all objectives minimized) and
their exact hypervolume.
"""

import numpy as np

from greenroute.core import HypervolumeError, MetricsVector

INCLUSION_EXCLUSION_MAX = 20


def dominates(a, b):
    """True when a is no worse than b everywhere and better somewhere."""
    return bool(np.all(a <= b) and np.any(a < b))


def nondominated(points):
    """Indices of the non-dominated rows of points, duplicates kept once."""
    points = np.asarray(points, dtype=float)
    keep = []
    for i, p in enumerate(points):
        if any(np.array_equal(points[k], p) for k in keep):
            continue
        no_worse = np.all(points <= p, axis=1)
        better = np.any(points < p, axis=1)
        if not np.any(no_worse & better):
            keep.append(i)
    return keep


################################
#                              #
#  ParetoFront Class           #
#                              #
################################

class ParetoFront:
    """
    Archive of non-dominated points. Each point carries a label dict
    (epoch, scheme, ...) that ends up in the archive CSV.
    """

    def __init__(self, n_objectives=4):
        self.n_objectives = n_objectives
        self._points = np.empty((0, n_objectives))
        self.labels = []
        self._worst = None

    def __repr__(self):
        return 'ParetoFront(points=%i)' % len(self)

    def __len__(self):
        return len(self._points)

    @property
    def points(self):
        return self._points.copy()

    @property
    def reference(self):
        """Component-wise worst of every point ever offered to the archive."""
        return None if self._worst is None else self._worst.copy()

    def insert(self, point, label=None):
        """Adds point unless it is dominated; prunes points it dominates.
        Returns True when the point was added."""
        if isinstance(point, MetricsVector):
            point = point.as_array()
        point = np.asarray(point, dtype=float)
        self._worst = point.copy() if self._worst is None else np.maximum(self._worst, point)
        pts = self._points
        if len(pts):
            no_better = np.all(pts <= point, axis=1)
            if np.any(no_better):
                return False
            dominated = np.all(point <= pts, axis=1) & np.any(point < pts, axis=1)
            if np.any(dominated):
                self._points = pts[~dominated]
                self.labels = [lab for lab, d in zip(self.labels, dominated) if not d]
        self._points = np.vstack([self._points, point[None]])
        self.labels.append(dict(label or {}))
        return True

    def extend(self, other):
        for point, label in zip(other.points, other.labels):
            self.insert(point, label)
        if other._worst is not None:
            self._worst = other._worst.copy() if self._worst is None \
                else np.maximum(self._worst, other._worst)
        return self

    def to_records(self, names=('ttft_s', 'carbon_kg', 'water_l', 'cost_usd')):
        records = []
        for point, label in zip(self._points, self.labels):
            record = dict(zip(names, (float(x) for x in point)))
            record.update(label)
            records.append(record)
        return records

    def hypervolume(self, reference):
        return normalized_hypervolume(self._points, reference)


################################
#                              #
#  Hypervolume                 #
#                              #
################################

def hypervolume(points, reference):
    """
    Volume dominated by points and bounded by reference. Exact
    inclusion-exclusion for small fronts, slicing by objective beyond.
    """
    reference = np.asarray(reference, dtype=float)
    points = np.asarray(points, dtype=float).reshape(-1, len(reference))
    if len(points) == 0:
        return 0.
    if np.any(points > reference):
        worst = points[np.any(points > reference, axis=1)][0]
        raise HypervolumeError('point %s exceeds reference %s' % (worst, reference))
    points = points[nondominated(points)]
    if len(points) <= INCLUSION_EXCLUSION_MAX:
        return _inclusion_exclusion(points, reference)
    return _slicing(points, reference)


def normalized_hypervolume(points, reference):
    """Hypervolume of points / reference against the unit corner."""
    reference = np.asarray(reference, dtype=float)
    if np.any(reference <= 0):
        raise HypervolumeError('reference must be positive, got %s' % reference)
    points = np.asarray(points, dtype=float).reshape(-1, len(reference))
    return hypervolume(points / reference, np.ones(len(reference)))


def _inclusion_exclusion(points, reference):
    corners = np.empty((0, points.shape[1]))
    signs = np.empty(0)
    for p in points:
        corners = np.vstack([corners, p[None], np.maximum(corners, p)])
        signs = np.concatenate([signs, [1.], -signs])
    return float(np.sum(signs * np.prod(reference - corners, axis=1)))


def _slicing(points, reference):
    if points.shape[1] == 1:
        return float(reference[0] - points[:, 0].min())
    points = points[np.argsort(points[:, 0], kind='stable')]
    bounds = np.append(points[1:, 0], reference[0])
    volume = 0.
    for i in range(len(points)):
        width = bounds[i] - points[i, 0]
        if width <= 0:
            continue
        head = points[:i + 1, 1:]
        volume += width * _slicing(head[nondominated(head)], reference[1:])
    return float(volume)
