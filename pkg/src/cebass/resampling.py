"""Optimal stratified subsampling of weighted candidates (Fearnhead & Clifford).

Candidates whose normalised weight exceeds a threshold ``kappa`` are kept
with their own weight; the rest are thinned by systematic sampling with
spacing ``kappa`` and each survivor is given weight ``kappa``. The threshold
solves ``sum_i min(w_i / kappa, 1) = N``, which makes the expected total
weight of every candidate equal to its original weight.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DegenerateFilterError
from .model import logsumexp


def threshold(w: np.ndarray, N: int) -> tuple[float, int]:
    """Return ``(kappa, n_keep)`` for normalised weights ``w`` with more than
    ``N`` strictly positive entries."""
    ws = np.sort(w)[::-1]
    tail = np.cumsum(ws[::-1])[::-1]  # tail[k] = sum of ws[k:]
    for k in range(N):
        kappa = tail[k] / (N - k)
        if ws[k] < kappa:
            return float(kappa), k
    # unreachable for more than N positive weights
    return float(ws[N - 1]), N - 1


def subsample(log_weights, N: int, rng: np.random.Generator):
    """Subsample to at most ``N`` candidates.

    Returns ``(indices, new_log_weights)``. New weights are on the same
    (unnormalised) scale as the input, so their sum is an unbiased estimate of
    the input total.
    """
    if N <= 0:
        raise ConfigError("number of particles must be positive")
    logw = np.asarray(log_weights, dtype=float)
    if logw.size == 0 or not np.any(np.isfinite(logw)):
        raise DegenerateFilterError("all candidate weights are zero")
    if np.any(np.isnan(logw)) or np.any(logw == np.inf):
        raise DegenerateFilterError("invalid candidate weight")
    total = logsumexp(logw)
    w = np.exp(logw - total)
    alive = np.flatnonzero(w > 0)
    if alive.size <= N:
        return alive, logw[alive]
    kappa, _ = threshold(w[alive], N)
    keep = alive[w[alive] >= kappa]
    rest = alive[w[alive] < kappa]
    n_draw = N - keep.size
    cum = np.cumsum(w[rest])
    points = rng.uniform(0.0, kappa) + kappa * np.arange(n_draw)
    picked = rest[np.minimum(np.searchsorted(cum, points, side="right"), rest.size - 1)]
    indices = np.concatenate([keep, picked])
    new_logw = np.concatenate([logw[keep], np.full(picked.size, np.log(kappa) + total)])
    order = np.argsort(indices, kind="stable")
    return indices[order], new_logw[order]
