"""Conjugate Gamma proposals for anomaly precisions and their exact weights.

Given a particle with filtering distribution ``N(mu, Sigma)`` the one-step
residual ``z = Y - C A mu`` has covariance ``Sigma_hat`` under typical
behaviour. An anomaly of precision ``x`` in an additive (or innovative)
component adds a rank-one term ``(noise_var / x) c c^T`` to that covariance,
with ``c = e_i`` (or the ``j``-th column of ``C``). Every quantity needed for
the proposal and the exact weight then reduces to the two scalars

    u = c^T Sigma_hat^{-1} z,     s = c^T Sigma_hat^{-1} c.

The proposal keeps the leading-order terms of the posterior in ``x`` and is
a scaled Gamma distribution; the weight is the exact ratio of the target to
the proposal density, so no approximation error enters the filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import ZeroColumnError
from .model import (
    ADDITIVE,
    INNOVATIVE,
    LOG_2PI,
    TYPICAL,
    CholeskyFactor,
    GaussianState,
    NoiseScales,
    StateSpaceModel,
    cholesky,
    predictive_variance,
)


MIN_PROBABILITY = 1e-300


@dataclass
class HyperParams:
    """Anomaly priors: probabilities ``r``/``s``, Gamma shapes ``a``/``b`` and
    precision scales ``sigma_tilde``/``sigma_hat`` for the additive and
    innovative components respectively."""

    r: np.ndarray
    s: np.ndarray
    a: np.ndarray
    b: np.ndarray
    sigma_tilde: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self):
        for name in ("r", "s", "a", "b", "sigma_tilde", "sigma_hat"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        p, q = self.r.size, self.s.size
        if self.a.size == 1 and p > 1:
            self.a = np.full(p, self.a[0])
        if self.b.size == 1 and q > 1:
            self.b = np.full(q, self.b[0])
        if self.a.size != p or self.sigma_tilde.size != p:
            raise ValueError("additive hyperparameters must all have length p")
        if self.b.size != q or self.sigma_hat.size != q:
            raise ValueError("innovative hyperparameters must all have length q")
        if np.any(self.r <= 0) or np.any(self.s <= 0):
            raise ValueError("anomaly probabilities must be positive")
        if self.r.sum() + self.s.sum() >= 1:
            raise ValueError("anomaly probabilities must sum to less than one")
        for name in ("a", "b", "sigma_tilde", "sigma_hat"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be strictly positive")

    @property
    def p(self) -> int:
        return self.r.size

    @property
    def q(self) -> int:
        return self.s.size

    @property
    def log_typical(self) -> float:
        """Log prior probability of a step with no anomaly."""
        return float(np.log1p(-(self.r.sum() + self.s.sum())))


def autocorrelation_adjusted(probs, rho: float) -> np.ndarray:
    """Raise anomaly probabilities to the power ``1 / (1 - rho)``.

    Used for strongly autocorrelated data where a persistent excursion would
    otherwise be split into many individual anomalies.
    """
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    out = np.asarray(probs, dtype=float) ** (1.0 / (1.0 - rho))
    # strong autocorrelation can push the result below the float range
    return np.maximum(out, MIN_PROBABILITY)


@dataclass
class ProposalDraw:
    scales: NoiseScales
    log_weight: float
    source_index: int
    unit_draw: float | None = None


@dataclass
class Predictive:
    """Residual and factorised predictive covariance for one particle."""

    z: np.ndarray
    factor: CholeskyFactor

    @classmethod
    def from_state(cls, state: GaussianState, y, model: StateSpaceModel, time=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = y - model.C @ (model.A @ state.mu)
        return cls(z, cholesky(predictive_variance(state, model), time))

    @property
    def loglik(self) -> float:
        w = self.factor.whiten(self.z)
        return float(-0.5 * (w @ w) - 0.5 * self.factor.logdet - 0.5 * self.z.size * LOG_2PI)


def gamma_rate(shape, scale, noise_var, u, s):
    """Rate of the conjugate proposal ``scale * Gamma(shape + 1/2, rate)``."""
    return shape + scale / (2.0 * noise_var) * (u / s) ** 2


def log_prior_over_proposal(g, shape, rate):
    """``log f(x) - log q(x)`` for ``x = scale * g``.

    ``f`` is the ``scale * Gamma(shape, shape)`` prior density and ``q`` the
    ``scale * Gamma(shape + 1/2, rate)`` proposal density; the scale cancels.
    """
    return (
        shape * np.log(shape)
        - gammaln(shape)
        + gammaln(shape + 0.5)
        - (shape + 0.5) * np.log(rate)
        - 0.5 * np.log(g)
        + (rate - shape) * g
    )


def rank_one_loglik_correction(tau, u, s):
    """Change in Gaussian log density when ``tau c c^T`` is added to the
    covariance (determinant lemma and Sherman-Morrison)."""
    ts = tau * s
    return -0.5 * np.log1p(ts) + 0.5 * tau * u * u / (1.0 + ts)


def anomaly_log_weight(g, shape, rate, scale, noise_var, u, s, base_loglik, log_prior, n_draws):
    """Exact log importance weight of a Gamma-proposed anomaly precision.

    ``g`` is the unit Gamma draw, so the precision is ``scale * g`` and the
    added variance is ``noise_var / (scale * g)``. ``n_draws`` is the number of
    draws sharing this proposal component (the stratification count).
    """
    tau = noise_var / (scale * g)
    return (
        log_prior
        - np.log(n_draws)
        + base_loglik
        + log_prior_over_proposal(g, shape, rate)
        + rank_one_loglik_correction(tau, u, s)
    )


_TINY = np.finfo(float).tiny


def draw_unit_gamma(rng: np.random.Generator, shape, rate, size=None):
    g = rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)
    # a zero draw only happens on underflow; clamp so the weight stays finite
    return np.maximum(g, _TINY)


def sample_typical(pred: Predictive, hp: HyperParams) -> ProposalDraw:
    """Deterministic no-anomaly descendant weighted by its predictive density."""
    scales = NoiseScales.typical(hp.p, hp.q)
    return ProposalDraw(scales, hp.log_typical + pred.loglik, -1)


def sample_additive_component(
    i: int,
    pred: Predictive,
    model: StateSpaceModel,
    hp: HyperParams,
    M_eff: int,
    rng: np.random.Generator,
    Sigma_hat_inv: np.ndarray | None = None,
) -> ProposalDraw:
    if Sigma_hat_inv is None:
        Sigma_hat_inv = pred.factor.inverse()
    s = Sigma_hat_inv[i, i]
    u = Sigma_hat_inv[i] @ pred.z
    noise_var = model.Sigma_A[i, i]
    shape, scale = hp.a[i], hp.sigma_tilde[i]
    rate = gamma_rate(shape, scale, noise_var, u, s)
    g = float(draw_unit_gamma(rng, shape + 0.5, rate))
    logw = anomaly_log_weight(
        g, shape, rate, scale, noise_var, u, s, pred.loglik, np.log(hp.r[i]), M_eff
    )
    scales = NoiseScales.additive(hp.p, hp.q, i, scale * g)
    return ProposalDraw(scales, float(logw), i, g)


def sample_innovative_component(
    j: int,
    pred: Predictive,
    C_aug: np.ndarray,
    model: StateSpaceModel,
    hp: HyperParams,
    M_eff: int,
    rng: np.random.Generator,
    log_prior_extra: float = 0.0,
) -> ProposalDraw:
    """Innovative anomaly in state component ``j``.

    ``C_aug`` maps the perturbed state to the stacked residual ``pred.z``; for
    a single observation it is ``C`` itself. ``log_prior_extra`` carries the
    no-anomaly prior factors of any further steps in a back-sampling window.
    """
    c = C_aug[:, j]
    if not np.any(c != 0):
        raise ZeroColumnError(f"column {j} of the observation map is zero")
    Sinv_c = pred.factor.solve(c)
    s = float(c @ Sinv_c)
    u = float(Sinv_c @ pred.z)
    noise_var = model.Sigma_I[j, j]
    shape, scale = hp.b[j], hp.sigma_hat[j]
    rate = gamma_rate(shape, scale, noise_var, u, s)
    g = float(draw_unit_gamma(rng, shape + 0.5, rate))
    logw = anomaly_log_weight(
        g, shape, rate, scale, noise_var, u, s, pred.loglik, np.log(hp.s[j]) + log_prior_extra, M_eff
    )
    scales = NoiseScales.innovative(hp.p, hp.q, j, scale * g)
    return ProposalDraw(scales, float(logw), j, g)


def sample_particles(
    state: GaussianState,
    y,
    model: StateSpaceModel,
    hp: HyperParams,
    M: int,
    rng: np.random.Generator,
) -> list[ProposalDraw]:
    """All ``M (p + q) + 1`` descendants of one particle for one observation."""
    if M < 1:
        raise ValueError("M must be at least 1")
    pred = Predictive.from_state(state, y, model)
    Sinv = pred.factor.inverse()
    draws = [sample_typical(pred, hp)]
    for _ in range(M):
        for i in range(model.p):
            draws.append(sample_additive_component(i, pred, model, hp, M, rng, Sinv))
    for _ in range(M):
        for j in range(model.q):
            draws.append(sample_innovative_component(j, pred, model.C, model, hp, M, rng))
    return draws


__all__ = [
    "ADDITIVE",
    "INNOVATIVE",
    "TYPICAL",
    "HyperParams",
    "Predictive",
    "ProposalDraw",
    "anomaly_log_weight",
    "autocorrelation_adjusted",
    "gamma_rate",
    "sample_additive_component",
    "sample_innovative_component",
    "sample_particles",
    "sample_typical",
]
