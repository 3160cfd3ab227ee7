"""Rank statistics: Spearman correlation with tie-averaged ranks."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UndefinedCorrelationError


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values all receive the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"ranks need a 1-D sequence, got shape {v.shape}")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        # positions i..j (0-based) share the value; average of 1-based ranks
        avg = 0.5 * (i + j) + 1.0
        ranks[order[i:j + 1]] = avg
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Pearson correlation of the average-rank transforms of x and y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"spearman_rho needs equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DimensionError("spearman_rho needs at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
