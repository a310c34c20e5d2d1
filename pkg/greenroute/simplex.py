#! /usr/bin/env python
"""
simplex.py
Euclidean projection of the last axis of an array onto the probability
simplex, and the vector-Jacobian product of that projection.
"""

import numpy as np


def project_rows(x):
    """
    Projects every row (last axis) of x onto {p : p >= 0, sum(p) = 1}.
    Sort-based, O(n log n) per row.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape
    rows = x.reshape(-1, shape[-1])
    n = rows.shape[1]
    srt = -np.sort(-rows, axis=1)
    cssv = np.cumsum(srt, axis=1) - 1.
    ind = np.arange(1, n + 1)
    cond = srt - cssv / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = cssv[np.arange(len(rows)), rho] / (rho + 1.)
    p = np.maximum(rows - theta[:, None], 0.)
    # exact row sums for the downstream plan validation
    p /= p.sum(axis=1, keepdims=True)
    return p.reshape(shape)


def project_rows_backward(p, grad):
    """
    Gradient with respect to the projection input, given the projection
    output p and the gradient with respect to p. On each row the Jacobian
    is the centering operator over the support of p.
    """
    support = p > 0
    size = support.sum(axis=-1, keepdims=True)
    mean = np.where(support, grad, 0.).sum(axis=-1, keepdims=True) / size
    return np.where(support, grad - mean, 0.)


def is_row_simplex(x, tol=1e-9):
    x = np.asarray(x)
    return bool(np.all(x >= -tol) and np.all(np.abs(x.sum(axis=-1) - 1.) <= tol))
