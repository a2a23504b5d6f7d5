"""Hyperparameter calibration from the steady-state predictive covariance.

The proposal scales are chosen so that an anomaly which one additive and one
innovative component explain equally well receives weights in the ratio of
their prior probabilities. That balance involves the predictive covariance,
which converges for an observable model; its limit is used throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backsampling import eligible_columns, innovation_scale_for_window
from .errors import ConfigError, ConvergenceError, UnobservableModelError
from .model import StateSpaceModel, cholesky
from .proposals import HyperParams

log = logging.getLogger(__name__)

DEFAULT_SHAPE = 3.0
DEFAULT_TOTAL_PROB = 1e-3


@dataclass
class SteadyState:
    Sigma_hat_limit: np.ndarray
    Sigma_limit: np.ndarray
    iterations: int
    converged: bool


def steady_state(model: StateSpaceModel, tol: float = 1e-14, max_iter: int = 100_000) -> SteadyState:
    """Iterate the typical-noise covariance recursion to its fixed point.

    Starts from ``Sigma_I``. Converged when the sup-norm change falls below
    ``tol`` relative to the largest entry; raises :class:`ConvergenceError`
    if that has not happened after ``max_iter`` iterations.
    """
    A, C = model.A, model.C
    Sigma = model.Sigma_I.copy()
    delta = np.inf
    for it in range(1, max_iter + 1):
        P = A @ Sigma @ A.T + model.Sigma_I
        S = C @ P @ C.T + model.Sigma_A
        K = cholesky(S).solve(C @ P).T
        new = P - K @ C @ P
        new = 0.5 * (new + new.T)
        delta = float(np.max(np.abs(new - Sigma)))
        Sigma = new
        if delta < tol * max(1.0, float(np.max(np.abs(Sigma)))):
            P = A @ Sigma @ A.T + model.Sigma_I
            S = C @ P @ C.T + model.Sigma_A
            return SteadyState(0.5 * (S + S.T), Sigma, it, True)
    raise ConvergenceError(
        f"covariance recursion did not converge in {max_iter} iterations (last change {delta:.3g})",
        last_delta=delta,
    )


def balanced_scales(model: StateSpaceModel, ss: SteadyState):
    """Precision scales ``(sigma_tilde, sigma_hat)`` balancing additive and
    innovative anomaly weights.

    ``sigma_tilde[i] = Sigma_A[i,i] (S^{-1})[i,i]`` and
    ``sigma_hat[j] = Sigma_I[j,j] (C^T S^{-1} C)[j,j]`` with ``S`` the limiting
    predictive covariance. Components with a zero column in ``C`` get
    ``sigma_hat = 0``; they can only be reached through back-sampling.
    """
    if not ss.converged:
        raise ConvergenceError("steady state did not converge")
    Sinv = cholesky(ss.Sigma_hat_limit).inverse()
    sigma_tilde = model.sigma_a * np.diag(Sinv)
    sigma_hat = model.sigma_i * np.diag(model.C.T @ Sinv @ model.C)
    return sigma_tilde, sigma_hat


def backsample_scales(model: StateSpaceModel, ss: SteadyState, horizons: list[set[int]]) -> np.ndarray:
    """Innovative precision scales when back-sampling over ``horizons``.

    For each component the maximum over its horizons of
    ``Sigma_I[j,j] (C_h^T S_h^{-1} C_h)[j,j]`` using the stacked window system
    started from the steady-state filtering covariance.
    """
    if len(horizons) != model.q:
        raise ConfigError(f"need {model.q} horizon sets, got {len(horizons)}")
    per_h = {}
    out = np.zeros(model.q)
    for j, B in enumerate(horizons):
        if not B:
            raise ConfigError(f"horizon set for component {j + 1} is empty")
        for h in B:
            if h not in per_h:
                per_h[h] = innovation_scale_for_window(model, ss.Sigma_limit, h)
            out[j] = max(out[j], per_h[h][j])
    return out


def observability_index(model: StateSpaceModel, k_max: int | None = None) -> int:
    """Smallest ``k`` such that ``[C; CA; ...; CA^k]`` has full column rank."""
    if k_max is None:
        k_max = 10 * model.q
    if k_max < model.q - 1:
        raise ValueError("k_max must be at least q - 1")
    rows = []
    Ak = np.eye(model.q)
    for k in range(k_max + 1):
        rows.append(model.C @ Ak)
        Ak = model.A @ Ak
        sv = np.linalg.svd(np.vstack(rows), compute_uv=False)
        if sv[0] > 0 and np.sum(sv > 1e-10 * sv[0]) == model.q:
            return k
    raise UnobservableModelError(f"model is not observable within {k_max} steps")


def default_horizons(model: StateSpaceModel, k_star: int) -> list[set[int]]:
    """Windows ``{h in 1..k*+1}`` on which each component is visible.

    A window of ``h`` observations reaches ``C A^{h-1}``, so ``k* + 1``
    observations suffice for every component of an observable model.
    """
    out = []
    for j in range(model.q):
        B = {h for h in range(1, k_star + 2) if eligible_columns(model, h)[j]}
        if not B:
            raise UnobservableModelError(f"state component {j + 1} is never observed")
        out.append(B)
    return out


def validate_horizons(model: StateSpaceModel, horizons: list[set[int]]) -> list[set[int]]:
    """Drop windows on which a component is invisible; reject empty sets."""
    if len(horizons) != model.q:
        raise ConfigError(f"need {model.q} horizon sets, got {len(horizons)}")
    out = []
    for j, B in enumerate(horizons):
        B = {int(h) for h in B}
        if not B or min(B) < 1:
            raise ConfigError(f"horizon set for component {j + 1} must be non-empty positive integers")
        kept = {h for h in B if eligible_columns(model, h)[j]}
        if kept != B:
            log.warning("component %d is invisible at horizons %s; dropped", j + 1, sorted(B - kept))
        if not kept:
            raise UnobservableModelError(f"state component {j + 1} is not visible at any requested horizon")
        out.append(kept)
    return out


def default_probabilities(p: int, q: int, total: float = DEFAULT_TOTAL_PROB):
    """Equal anomaly probabilities summing to ``total``."""
    each = total / (p + q)
    return np.full(p, each), np.full(q, each)


def calibrate(
    model: StateSpaceModel,
    horizons: list[set[int]] | None = None,
    r=None,
    s=None,
    shape: float = DEFAULT_SHAPE,
    k_max: int | None = None,
):
    """Steady state, horizons and hyperparameters for ``model``.

    Returns ``(hyperparams, horizons, steady_state, k_star)``.
    """
    k_star = observability_index(model, k_max)
    if horizons is None:
        horizons = default_horizons(model, k_star)
    else:
        horizons = validate_horizons(model, horizons)
    ss = steady_state(model)
    sigma_tilde, _ = balanced_scales(model, ss)
    sigma_hat = backsample_scales(model, ss, horizons)
    r_def, s_def = default_probabilities(model.p, model.q)
    r = r_def if r is None else np.broadcast_to(np.asarray(r, dtype=float), (model.p,)).copy()
    s = s_def if s is None else np.broadcast_to(np.asarray(s, dtype=float), (model.q,)).copy()
    hp = HyperParams(r, s, np.full(model.p, shape), np.full(model.q, shape), sigma_tilde, sigma_hat)
    return hp, horizons, ss, k_star
