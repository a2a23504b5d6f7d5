"""Back-sampling of innovative anomalies that only become visible later.

A horizon ``h`` refers to a window of the last ``h`` observations
``Y_{t-h+1}, ..., Y_t`` together with the filtering distribution of a
particle at time ``t - h``. The candidate anomaly sits in the innovation of
``X_{t-h+1}``; every other step of the window is typical. Horizon 1 is the
ordinary single-observation innovative proposal.

Two routes compute the same quantities:

* :func:`build_augmented` assembles the stacked observation system densely
  and is the reference implementation.
* :class:`ShadowBank` runs, for every stored particle and lag, the
  no-anomaly Kalman chain forward one observation at a time together with
  the regression statistics of a unit shift in each component of
  ``X_{t-h+1}``. This gives the stacked log-likelihood and the two scalars
  ``c^T S^{-1} z`` and ``c^T S^{-1} c`` in O(1) per step and lag, and the
  exact time-``t`` filtering distribution of a back-sampled particle in
  closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import SingularCovarianceError
from .model import (
    LOG_2PI,
    CholeskyFactor,
    GaussianState,
    NoiseScales,
    StateSpaceModel,
    cholesky,
    kf_update,
)
from .proposals import HyperParams, Predictive, ProposalDraw, sample_innovative_component

log = logging.getLogger(__name__)


def stacked_observation_matrix(model: StateSpaceModel, horizon: int) -> np.ndarray:
    """Blocks ``C A^0, C A^1, ..., C A^{horizon-1}`` stacked vertically."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    blocks = []
    Ak = np.eye(model.q)
    for _ in range(horizon):
        blocks.append(model.C @ Ak)
        Ak = model.A @ Ak
    return np.vstack(blocks)


def eligible_columns(model: StateSpaceModel, horizon: int) -> np.ndarray:
    """Boolean mask of state components visible within ``horizon`` steps."""
    return np.any(stacked_observation_matrix(model, horizon) != 0, axis=0)


def augmented_covariance(Sigma_prev: np.ndarray, model: StateSpaceModel, horizon: int) -> np.ndarray:
    """Exact covariance of the stacked residual under typical behaviour.

    ``Sigma_prev`` is the filtering covariance at the start of the window.
    Innovations entering after the first step are propagated through ``A``,
    so off-diagonal blocks pick up ``C Var(X_m) (A^{n-m})^T C^T``.
    """
    A, C = model.A, model.C
    p = model.p
    var_x = A @ Sigma_prev @ A.T + model.Sigma_I
    variances = []
    for m in range(horizon):
        if m > 0:
            var_x = A @ var_x @ A.T + model.Sigma_I
        variances.append(var_x)
    out = np.zeros((horizon * p, horizon * p))
    for m in range(horizon):
        cross = variances[m]
        for n in range(m, horizon):
            block = C @ cross @ C.T
            out[m * p:(m + 1) * p, n * p:(n + 1) * p] = block
            out[n * p:(n + 1) * p, m * p:(m + 1) * p] = block.T
            cross = cross @ A.T
        out[m * p:(m + 1) * p, m * p:(m + 1) * p] += model.Sigma_A
    return 0.5 * (out + out.T)


@dataclass
class AugmentedSystem:
    horizon: int
    C_aug: np.ndarray
    Sigma_hat_aug: np.ndarray
    z_aug: np.ndarray
    factor: CholeskyFactor

    @property
    def predictive(self) -> Predictive:
        return Predictive(self.z_aug, self.factor)


def build_augmented(state: GaussianState, model: StateSpaceModel, ys, horizon: int) -> AugmentedSystem:
    """Stacked system for the window of ``horizon`` observations after ``state``."""
    ys = np.asarray(ys, dtype=float).reshape(horizon, model.p)
    C_aug = stacked_observation_matrix(model, horizon)
    S = augmented_covariance(state.Sigma, model, horizon)
    z = ys.reshape(-1) - C_aug @ (model.A @ state.mu)
    return AugmentedSystem(horizon, C_aug, S, z, cholesky(S))


def sample_backsampled(
    state: GaussianState,
    ys,
    model: StateSpaceModel,
    hp: HyperParams,
    M: int,
    horizon: int,
    horizons: list[set[int]],
    rng: np.random.Generator,
) -> list[ProposalDraw]:
    """Innovative-anomaly draws at the start of a window of ``horizon`` steps.

    Component ``j`` is sampled only when ``horizon`` is in ``horizons[j]``;
    each draw is weighted with stratification count ``M * |horizons[j]|`` and
    carries the no-anomaly prior factor of the ``horizon - 1`` later steps.
    """
    system = build_augmented(state, model, ys, horizon)
    pred = system.predictive
    extra = (horizon - 1) * hp.log_typical
    draws = []
    for j in range(model.q):
        if horizon not in horizons[j]:
            continue
        if not np.any(system.C_aug[:, j] != 0):
            log.info("component %d invisible within horizon %d; skipped", j, horizon)
            continue
        for _ in range(M):
            draws.append(
                sample_innovative_component(
                    j, pred, system.C_aug, model, hp, M * len(horizons[j]), rng, extra
                )
            )
    return draws


def replay_updates(draw: ProposalDraw, state: GaussianState, ys, model: StateSpaceModel):
    """Filter a back-sampled particle to the end of its window.

    The first observation is processed with the drawn inflation and the rest
    with typical noise. Returns the final state and the summed log-likelihood.
    """
    ys = np.asarray(ys, dtype=float).reshape(-1, model.p)
    state, total = kf_update(ys[0], state, model, draw.scales)
    for y in ys[1:]:
        state, ll = kf_update(y, state, model)
        total += ll
    return state, total


def _batched_solve(F: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.linalg.solve(F, rhs)


def _batched_logdet(F: np.ndarray, time=None) -> np.ndarray:
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        # fall back to the escalating-jitter path one matrix at a time
        return np.array([cholesky(f, time).logdet for f in F])
    return 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)


class ShadowBank:
    """No-anomaly Kalman chains for stored particles, advanced in one batch.

    Each row is started from a particle's filtering distribution at some time
    ``s`` and then absorbs every later observation with typical noise. Along
    with the filtered mean ``m`` and covariance ``P`` it tracks, for each state
    component ``j``, the response ``G[:, :, j]`` of the filtered mean to a unit
    shift of ``X_{s+1}`` along ``e_j``, and the regression statistics

        U[:, j] = c_j^T S^{-1} z,   Sdiag[:, j] = c_j^T S^{-1} c_j

    of the stacked window, where ``c_j`` is the ``j``-th column of the stacked
    observation matrix and ``S`` the stacked typical covariance.
    """

    def __init__(self, model: StateSpaceModel):
        self.model = model
        q = model.q
        self.m = np.zeros((0, q))
        self.P = np.zeros((0, q, q))
        self.G = np.zeros((0, q, q))
        self.loglik = np.zeros(0)
        self.U = np.zeros((0, q))
        self.Sdiag = np.zeros((0, q))
        self.age = np.zeros(0, dtype=int)
        # gain of the most recent update, (n, q, p)
        self.K = np.zeros((0, q, model.p))
        # filtered quantities are only valid after the first update
        self._pending = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return self.m.shape[0]

    def add(self, mu: np.ndarray, Sigma: np.ndarray):
        """Start new rows from filtering distributions ``(n, q)``/``(n, q, q)``."""
        n, q = mu.shape
        self.m = np.concatenate([self.m, mu])
        self.P = np.concatenate([self.P, Sigma])
        self.G = np.concatenate([self.G, np.broadcast_to(np.eye(q), (n, q, q))])
        self.loglik = np.concatenate([self.loglik, np.zeros(n)])
        self.U = np.concatenate([self.U, np.zeros((n, q))])
        self.Sdiag = np.concatenate([self.Sdiag, np.zeros((n, q))])
        self.age = np.concatenate([self.age, np.zeros(n, dtype=int)])
        self.K = np.concatenate([self.K, np.zeros((n, q, self.model.p))])
        self._pending = np.concatenate([self._pending, np.ones(n, dtype=bool)])

    def keep(self, mask: np.ndarray):
        for name in ("m", "P", "G", "loglik", "U", "Sdiag", "age", "K", "_pending"):
            setattr(self, name, getattr(self, name)[mask])

    def update(self, y: np.ndarray, time=None):
        """Absorb one observation in every row.

        Returns the per-row one-step quantities ``(z, F, Finv_z)`` of this
        observation, which the additive proposals need.
        """
        model = self.model
        A, C = model.A, model.C
        pending = self._pending
        # predict; the shift response starts as the identity at the first step
        m_p = self.m @ A.T
        P_p = A @ self.P @ A.T + model.Sigma_I
        G_p = np.where(pending[:, None, None], self.G, A @ self.G)
        z = y - m_p @ C.T
        CP = C @ P_p
        F = CP @ C.T + model.Sigma_A
        F = 0.5 * (F + np.swapaxes(F, 1, 2))
        E = C @ G_p
        p = model.p
        rhs = np.concatenate([z[:, :, None], E, CP], axis=2)
        sol = _batched_solve(F, rhs)
        Finv_z = sol[:, :, 0]
        Finv_E = sol[:, :, 1:1 + model.q]
        Finv_CP = sol[:, :, 1 + model.q:]
        K = np.swapaxes(Finv_CP, 1, 2)
        logdet = _batched_logdet(F, time)
        self.loglik = self.loglik - 0.5 * np.einsum("ni,ni->n", z, Finv_z) - 0.5 * logdet - 0.5 * p * LOG_2PI
        self.U = self.U + np.einsum("nij,ni->nj", E, Finv_z)
        self.Sdiag = self.Sdiag + np.einsum("nij,nij->nj", E, Finv_E)
        self.m = m_p + np.einsum("nij,nj->ni", K, z)
        P = P_p - K @ CP
        self.P = 0.5 * (P + np.swapaxes(P, 1, 2))
        self.G = G_p - K @ E
        self.K = K
        self.age = self.age + 1
        self._pending = np.zeros(len(self), dtype=bool)
        if not np.all(np.isfinite(self.loglik)):
            raise SingularCovarianceError("non-finite likelihood in shadow chains", time)
        return z, F, Finv_z

    def states_with_additive(self, rows, i, tau, Finv_diag, Finv_z):
        """Batched filtering distributions when the last observation had extra
        variance ``tau`` in component ``i``.

        Adding ``tau e_i e_i^T`` to the one-step covariance changes the update
        by a rank-one term along the ``i``-th column of the typical gain.
        """
        rows = np.asarray(rows)
        k = self.K[rows, :, i]
        s = Finv_diag
        var = tau / (1.0 + tau * s)
        mu = self.m[rows] - k * (var * Finv_z)[:, None]
        Sigma = self.P[rows] + var[:, None, None] * k[:, :, None] * k[:, None, :]
        return mu, Sigma

    def states_with_innovative(self, rows, j, tau):
        """Batched version of :meth:`state_with_anomaly`."""
        rows = np.asarray(rows)
        s = self.Sdiag[rows, j]
        var = tau / (1.0 + tau * s)
        g = self.G[rows, :, j]
        mu = self.m[rows] + g * (var * self.U[rows, j])[:, None]
        Sigma = self.P[rows] + var[:, None, None] * g[:, :, None] * g[:, None, :]
        return mu, Sigma

    def state_with_anomaly(self, row: int, j: int, tau: float) -> GaussianState:
        """Filtering distribution of row ``row`` if the first innovation of its
        window had extra variance ``tau`` in component ``j``.

        Integrates the shift out of the regression: the shift has prior
        ``N(0, tau)`` and likelihood information ``(U, Sdiag)``.
        """
        s = self.Sdiag[row, j]
        u = self.U[row, j]
        var = tau / (1.0 + tau * s)
        mean = var * u
        g = self.G[row, :, j]
        mu = self.m[row] + g * mean
        Sigma = self.P[row] + var * np.outer(g, g)
        return GaussianState(mu, 0.5 * (Sigma + Sigma.T))


def innovation_scale_for_window(
    model: StateSpaceModel, Sigma_prev: np.ndarray, horizon: int
) -> np.ndarray:
    """``Sigma_I[j, j] * (c_j^T S^{-1} c_j)`` for each component ``j`` over a
    window of ``horizon`` observations; zero for invisible components."""
    C_aug = stacked_observation_matrix(model, horizon)
    S = augmented_covariance(Sigma_prev, model, horizon)
    fac = cholesky(S)
    info = C_aug.T @ fac.solve(C_aug)
    return model.sigma_i * np.diag(info)


__all__ = [
    "AugmentedSystem",
    "ShadowBank",
    "augmented_covariance",
    "build_augmented",
    "eligible_columns",
    "innovation_scale_for_window",
    "replay_updates",
    "sample_backsampled",
    "stacked_observation_matrix",
]
