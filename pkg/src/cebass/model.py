"""Linear-Gaussian state-space model and the conditional Kalman recursion.

The model is

    Y_t = C X_t + V_t^{1/2} Sigma_A^{1/2} eps_t
    X_t = A X_{t-1} + W_t^{1/2} Sigma_I^{1/2} nu_t

with diagonal noise covariances and diagonal inflation factors ``V_t``,
``W_t`` that are the identity in the absence of anomalies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import SingularCovarianceError

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_START = 1e-12
JITTER_STOP = 1e-6
MAX_CONDITION = 1e14

TYPICAL = "typical"
ADDITIVE = "additive"
INNOVATIVE = "innovative"


def _as_matrix(x, name):
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    return arr


def _as_diag(x, n, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim <= 1:
        arr = np.diag(np.broadcast_to(arr, (n,)).astype(float))
    if arr.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}, got {arr.shape}")
    if np.any(np.abs(arr - np.diag(np.diag(arr))) > 0):
        raise ValueError(f"{name} must be diagonal")
    if np.any(np.diag(arr) <= 0):
        raise ValueError(f"{name} must have strictly positive diagonal entries")
    return arr


@dataclass(frozen=True)
class StateSpaceModel:
    """Time-invariant linear-Gaussian model.

    ``Sigma_A`` and ``Sigma_I`` may be given as full diagonal matrices or as
    vectors of their diagonal entries.
    """

    A: np.ndarray
    C: np.ndarray
    Sigma_A: np.ndarray
    Sigma_I: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        C = _as_matrix(self.C, "C")
        q = A.shape[0]
        if A.shape != (q, q):
            raise ValueError(f"A must be square, got {A.shape}")
        if C.shape[1] != q:
            raise ValueError(f"C must have {q} columns, got {C.shape}")
        p = C.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Sigma_A", _as_diag(self.Sigma_A, p, "Sigma_A"))
        object.__setattr__(self, "Sigma_I", _as_diag(self.Sigma_I, q, "Sigma_I"))
        for arr in (self.A, self.C, self.Sigma_A, self.Sigma_I):
            arr.setflags(write=False)

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def sigma_a(self) -> np.ndarray:
        """Diagonal of the additive noise covariance."""
        return np.diag(self.Sigma_A).copy()

    @property
    def sigma_i(self) -> np.ndarray:
        """Diagonal of the innovation covariance."""
        return np.diag(self.Sigma_I).copy()

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "Sigma_A": self.sigma_a.tolist(),
            "Sigma_I": self.sigma_i.tolist(),
        }


@dataclass
class GaussianState:
    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))

    def copy(self) -> "GaussianState":
        return GaussianState(self.mu.copy(), self.Sigma.copy())


@dataclass(frozen=True)
class NoiseScales:
    """Diagonal inflation factors for one time step.

    At most one entry of ``V`` or ``W`` differs from one. ``precision`` is the
    sampled anomaly precision (``V[i] = 1 + 1/precision``) and ``index`` the
    affected component; both are ``None`` for typical behaviour.
    """

    V: np.ndarray
    W: np.ndarray
    kind: str = TYPICAL
    index: int | None = None
    precision: float | None = None

    @classmethod
    def typical(cls, p: int, q: int) -> "NoiseScales":
        return cls(np.ones(p), np.ones(q))

    @classmethod
    def additive(cls, p: int, q: int, i: int, precision: float) -> "NoiseScales":
        if not precision > 0:
            raise ValueError("anomaly precision must be positive")
        V = np.ones(p)
        V[i] = 1.0 + 1.0 / precision
        return cls(V, np.ones(q), ADDITIVE, i, float(precision))

    @classmethod
    def innovative(cls, p: int, q: int, j: int, precision: float) -> "NoiseScales":
        if not precision > 0:
            raise ValueError("anomaly precision must be positive")
        W = np.ones(q)
        W[j] = 1.0 + 1.0 / precision
        return cls(np.ones(p), W, INNOVATIVE, j, float(precision))

    def is_typical(self) -> bool:
        return self.kind == TYPICAL


class CholeskyFactor:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""

    def __init__(self, L: np.ndarray):
        self.L = L

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.L, True), b, check_finite=False)

    def whiten(self, b: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} b``."""
        return linalg.solve_triangular(self.L, b, lower=True, check_finite=False)

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def condition_estimate(self) -> float:
        d = np.diag(self.L)
        return float((d.max() / d.min()) ** 2)


def cholesky(S: np.ndarray, time: int | None = None) -> CholeskyFactor:
    """Cholesky factor with jitter escalation.

    Adds ``jitter * trace(S) * I`` starting at 1e-12 and growing tenfold up to
    1e-6 before giving up.
    """
    S = 0.5 * (S + S.T)
    try:
        return CholeskyFactor(np.linalg.cholesky(S))
    except np.linalg.LinAlgError:
        pass
    scale = float(np.trace(S)) / S.shape[0]
    if not np.isfinite(scale) or scale <= 0:
        raise SingularCovarianceError("covariance has non-positive trace", time)
    jitter = JITTER_START
    eye = np.eye(S.shape[0])
    while jitter <= JITTER_STOP * (1 + 1e-9):
        try:
            return CholeskyFactor(np.linalg.cholesky(S + jitter * scale * eye))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularCovarianceError("covariance is not positive definite", time)


def logsumexp(a) -> float:
    """Log of the summed exponentials of a 1-d array.

    Plain numpy; the scipy version carries array-API overhead that dominates
    for the short arrays handled once per filter step.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size == 0:
        return -np.inf
    m = a.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(a - m).sum()))


def log_gaussian_density(x, mu, Sigma) -> float:
    """Log density of ``x`` under ``N(mu, Sigma)`` evaluated via Cholesky."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    fac = cholesky(np.atleast_2d(np.asarray(Sigma, dtype=float)))
    w = fac.whiten(x - mu)
    return float(-0.5 * (w @ w) - 0.5 * fac.logdet - 0.5 * x.size * LOG_2PI)


def predictive_variance(state: GaussianState, model: StateSpaceModel) -> np.ndarray:
    """Covariance of the next observation under typical behaviour.

    ``C A Sigma A^T C^T + Sigma_A + C Sigma_I C^T``.
    """
    A, C = model.A, model.C
    P = A @ state.Sigma @ A.T + model.Sigma_I
    S = C @ P @ C.T + model.Sigma_A
    return 0.5 * (S + S.T)


def kf_update(
    y,
    state: GaussianState,
    model: StateSpaceModel,
    scales: NoiseScales | None = None,
    time: int | None = None,
) -> tuple[GaussianState, float]:
    """One predict/update step with inflated noise covariances.

    Returns the filtering distribution at the new time and the log predictive
    density of ``y``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    A, C = model.A, model.C
    if scales is None:
        R = model.Sigma_A
        Q = model.Sigma_I
    else:
        R = model.Sigma_A * scales.V[:, None]
        Q = model.Sigma_I * scales.W[:, None]
    mu_p = A @ state.mu
    P = A @ state.Sigma @ A.T + Q
    P = 0.5 * (P + P.T)
    S = C @ P @ C.T + R
    fac = cholesky(S, time)
    if fac.condition_estimate() > MAX_CONDITION:
        raise SingularCovarianceError("predictive covariance is numerically singular", time)
    z = y - C @ mu_p
    # K = P C^T S^{-1}
    K = fac.solve(C @ P).T
    mu_new = mu_p + K @ z
    IKC = np.eye(model.q) - K @ C
    Sigma_new = IKC @ P @ IKC.T + K @ R @ K.T
    Sigma_new = 0.5 * (Sigma_new + Sigma_new.T)
    w = fac.whiten(z)
    loglik = float(-0.5 * (w @ w) - 0.5 * fac.logdet - 0.5 * model.p * LOG_2PI)
    return GaussianState(mu_new, Sigma_new), loglik


def kalman_filter(ys, model: StateSpaceModel, prior: GaussianState):
    """Run the classical filter over a sequence; yields ``(state, loglik)``."""
    state = prior
    for t, y in enumerate(ys, start=1):
        state, ll = kf_update(y, state, model, time=t)
        yield state, ll
