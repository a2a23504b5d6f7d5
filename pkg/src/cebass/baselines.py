"""Comparison filters: the classical Kalman filter and two Huberised variants.

All filters yield one :class:`FilterOutput` per observation holding the
one-step predictive distribution that was formed *before* the observation
was seen, its log density at the observation and the updated state.

The Huber variants standardise each residual component by the square root
of the matching diagonal entry of the predictive covariance.

* ``AO`` mode clips the standardised residual at ``+-clip`` before the gain
  is applied, so a single wild observation moves the state by a bounded
  amount. The covariance recursion is the classical one.
* ``IO`` mode treats a large standardised residual as evidence of a large
  state increment. With Huber weight ``w = min(1, clip / max|r_k|)`` the
  predicted state covariance is inflated to ``P / w`` before the update,
  which lets the state follow level shifts quickly.

Both reduce to the classical filter as ``clip`` goes to infinity.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import LOG_2PI, GaussianState, StateSpaceModel, cholesky

AO = "AO"
IO = "IO"


@dataclass(frozen=True)
class HuberConfig:
    clip: float = 1.345
    mode: str = AO

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError("Huber clip must be positive")
        if self.mode not in (AO, IO):
            raise ConfigError(f"Huber mode must be 'AO' or 'IO', got {self.mode!r}")


@dataclass
class FilterOutput:
    state: GaussianState
    pred_mean: np.ndarray
    pred_var: np.ndarray
    pred_loglik: float

    def squared_error(self, y) -> float:
        d = np.atleast_1d(y) - self.pred_mean
        return float(d @ d)


def _step(state: GaussianState, y, model: StateSpaceModel, time, inflate=None):
    """Predict, score ``y`` and compute the gain.

    ``inflate`` maps ``(z, F)`` to a divisor of the predicted covariance
    (Huber IO mode). Returns ``(m, P, z, F, K, loglik)`` where ``P`` and ``K``
    reflect any inflation and ``F``/``loglik`` do not.
    """
    A, C = model.A, model.C
    m = A @ state.mu
    P = A @ state.Sigma @ A.T + model.Sigma_I
    P = 0.5 * (P + P.T)
    z = y - C @ m
    F = C @ P @ C.T + model.Sigma_A
    F = 0.5 * (F + F.T)
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        L = cholesky(F, time).L
    w = np.linalg.solve(L, z)
    loglik = float(-0.5 * (w @ w) - np.log(np.diag(L)).sum() - 0.5 * z.size * LOG_2PI)
    if inflate is not None:
        P = P / inflate(z, F)
        Fk = C @ P @ C.T + model.Sigma_A
    else:
        Fk = F
    K = np.linalg.solve(Fk, C @ P).T
    return m, P, z, F, K, loglik


def _posterior_cov(P, K, model: StateSpaceModel):
    IKC = np.eye(model.q) - K @ model.C
    Sigma = IKC @ P @ IKC.T + K @ model.Sigma_A @ K.T
    return 0.5 * (Sigma + Sigma.T)


def huber_psi(r, clip: float):
    return np.clip(r, -clip, clip)


def huber_filter(
    ys: Iterable, model: StateSpaceModel, cfg: HuberConfig, prior: GaussianState
) -> Iterator[FilterOutput]:
    """Huberised Kalman filter in ``AO`` or ``IO`` mode."""
    C = model.C
    clip = cfg.clip

    def io_weight(z, F):
        worst = float(np.max(np.abs(z) / np.sqrt(np.diag(F))))
        return 1.0 if worst <= clip else clip / worst

    state = prior
    for t, y in enumerate(ys, start=1):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if cfg.mode == AO:
            m, P, z, F, K, ll = _step(state, y, model, t)
            sd = np.sqrt(np.diag(F))
            mu = m + K @ (huber_psi(z / sd, clip) * sd)
        else:
            m, P, z, F, K, ll = _step(state, y, model, t, io_weight)
            mu = m + K @ z
        state = GaussianState(mu, _posterior_cov(P, K, model))
        yield FilterOutput(state, C @ m, F, ll)


def classical_kf(ys: Iterable, model: StateSpaceModel, prior: GaussianState) -> Iterator[FilterOutput]:
    """The Kalman filter with typical noise at every step."""
    C = model.C
    state = prior
    for t, y in enumerate(ys, start=1):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        m, P, z, F, K, ll = _step(state, y, model, t)
        state = GaussianState(m + K @ z, _posterior_cov(P, K, model))
        yield FilterOutput(state, C @ m, F, ll)
