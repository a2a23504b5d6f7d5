"""Rao-Blackwellised particle filter with back-sampling of innovative anomalies.

Each particle is a Gaussian filtering distribution for the state conditional
on its sampled history of noise inflations. At every step the candidates are

* one typical and ``M`` additive-anomaly descendants of each particle from
  the previous step, and
* ``M`` innovative-anomaly descendants for each component ``j`` and each
  horizon ``h`` in its horizon set, started from the particles stored ``h``
  steps back with the anomaly placed at the first step of the window.

The candidates are thinned to ``N`` particles with optimal stratified
subsampling. Weights are kept unnormalised on the log scale so that stored
particles from earlier steps remain comparable with current ones.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

import numpy as np

from .backsampling import ShadowBank, eligible_columns
from .calibration import calibrate, steady_state
from .errors import ConfigError, DegenerateFilterError
from .model import (
    ADDITIVE,
    INNOVATIVE,
    TYPICAL,
    GaussianState,
    NoiseScales,
    StateSpaceModel,
    kf_update,
    logsumexp,
)
from .proposals import (
    HyperParams,
    anomaly_log_weight,
    autocorrelation_adjusted,
    draw_unit_gamma,
    gamma_rate,
)
from .resampling import subsample

log = logging.getLogger(__name__)

_KIND_CODE = {TYPICAL: 0, ADDITIVE: 1, INNOVATIVE: 2}


@dataclass(frozen=True)
class AnomalyEvent:
    time: int
    kind: str
    component: int  # zero-based


@dataclass
class FilterConfig:
    N: int
    M: int
    hp: HyperParams
    horizons: list[set[int]]
    seed: int | None = 0
    anomaly_threshold: float = 0.5
    history_window: int | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if not 0 < self.anomaly_threshold < 1:
            raise ConfigError("anomaly_threshold must lie in (0, 1)")
        if len(self.horizons) != self.hp.q:
            raise ConfigError("one horizon set per state component is required")
        self.horizons = [set(int(h) for h in B) for B in self.horizons]
        if any(not B or min(B) < 1 for B in self.horizons):
            raise ConfigError("horizon sets must be non-empty sets of positive integers")

    @property
    def max_horizon(self) -> int:
        return max(max(B) for B in self.horizons)

    @property
    def window(self) -> int:
        """Number of past steps for which anomaly annotations are retained."""
        if self.history_window is not None:
            return self.history_window
        return self.max_horizon + 100

    @classmethod
    def calibrated(
        cls,
        model: StateSpaceModel,
        N: int = 20,
        M: int = 1,
        horizons=None,
        r=None,
        s=None,
        shape: float = 3.0,
        rho: float | None = None,
        seed: int | None = 0,
        anomaly_threshold: float = 0.5,
        history_window: int | None = None,
    ) -> "FilterConfig":
        """Config with hyperparameters calibrated to ``model``.

        ``rho`` applies the autocorrelation adjustment to the probabilities.
        """
        hp, horizons, _, _ = calibrate(model, horizons=horizons, r=r, s=s, shape=shape)
        if rho is not None:
            hp = HyperParams(
                autocorrelation_adjusted(hp.r, rho),
                autocorrelation_adjusted(hp.s, rho),
                hp.a, hp.b, hp.sigma_tilde, hp.sigma_hat,
            )
        return cls(N, M, hp, horizons, seed, anomaly_threshold, history_window)


@dataclass
class Particle:
    state: GaussianState
    log_weight: float
    last_scales: NoiseScales
    horizon: int = 1
    history: tuple[AnomalyEvent, ...] = ()

    @property
    def anomaly_tag(self) -> AnomalyEvent | None:
        return self.history[-1] if self.history else None


@dataclass
class AnomalyReport:
    time: int
    p_additive: np.ndarray
    p_innovative: np.ndarray
    map_particle_state: GaussianState
    predictive_log_lik: float
    predictive_mean: np.ndarray
    predictive_var: np.ndarray
    innovative_lag: np.ndarray | None = None
    flags: list[AnomalyEvent] = field(default_factory=list)

    def flag_string(self) -> str:
        if not self.flags:
            return "none"
        parts = []
        for ev in self.flags:
            lag = self.time - ev.time
            if ev.kind == ADDITIVE:
                parts.append(f"add:{ev.component + 1}" + (f"@{lag}" if lag else ""))
            else:
                parts.append(f"inn:{ev.component + 1}@{lag}")
        return ";".join(parts)


def anomaly_posteriors(particles: list[Particle], time: int, p: int, q: int):
    """Posterior probability of an anomaly created at ``time`` per component.

    Innovative anomalies count regardless of how far back they were dated.
    Returns ``(p_additive, p_innovative, modal_lag)``.
    """
    logw = np.array([pt.log_weight for pt in particles])
    w = np.exp(logw - logsumexp(logw))
    p_add = np.zeros(p)
    p_inn = np.zeros(q)
    lag_mass: dict[tuple[int, int], float] = {}
    for wi, pt in zip(w, particles):
        if pt.last_scales.kind == ADDITIVE:
            p_add[pt.last_scales.index] += wi
        elif pt.last_scales.kind == INNOVATIVE:
            j = pt.last_scales.index
            p_inn[j] += wi
            key = (j, pt.horizon - 1)
            lag_mass[key] = lag_mass.get(key, 0.0) + wi
    lags = np.full(q, -1)
    best = np.zeros(q)
    for (j, lag), m in lag_mass.items():
        if m > best[j]:
            best[j], lags[j] = m, lag
    return np.minimum(p_add, 1.0), np.minimum(p_inn, 1.0), lags


class CEBASS:
    """Streaming robust filter; one instance per data stream.

    Parameters
    ----------
    model : StateSpaceModel
    config : FilterConfig
    prior : GaussianState, optional
        Filtering distribution at time 0. Defaults to a zero mean with the
        steady-state filtering covariance.
    """

    def __init__(self, model: StateSpaceModel, config: FilterConfig, prior: GaussianState | None = None):
        if config.hp.p != model.p or config.hp.q != model.q:
            raise ConfigError("hyperparameter dimensions do not match the model")
        self.model = model
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        if prior is None:
            prior = GaussianState(np.zeros(model.q), steady_state(model).Sigma_limit)
        q = model.q
        self.t = 0
        # current particle set, stored column-wise
        self._mu = prior.mu.reshape(1, q).copy()
        self._Sig = prior.Sigma.reshape(1, q, q).copy()
        self._logw = np.zeros(1)
        self._kind = np.zeros(1, dtype=int)
        self._comp = np.full(1, -1)
        self._prec = np.ones(1)
        self._hor = np.ones(1, dtype=int)
        self._hist: list[tuple] = [()]

        self.bank = ShadowBank(model)
        self._row_logw = np.zeros(0)
        self._row_hist: list[tuple] = []
        self._flagged: set[AnomalyEvent] = set()
        hp = config.hp
        self._log_typ = hp.log_typical
        self._col_visible = eligible_columns(model, 1)
        self._max_h = config.max_horizon
        # member[h, j] is True when h is in the horizon set of component j
        self._member = np.zeros((self._max_h + 1, q), dtype=bool)
        for j, B in enumerate(config.horizons):
            for h in B:
                self._member[h, j] = True
        self._nB = np.array([len(B) for B in config.horizons], dtype=float)
        self._needs_pred = self._col_visible & ~self._member[1]
        self._a, self._b, self._st, self._sh = hp.a, hp.b, hp.sigma_tilde, hp.sigma_hat
        self._sa, self._si = model.sigma_a, model.sigma_i
        self._log_r, self._log_s = np.log(hp.r), np.log(hp.s)

    # ------------------------------------------------------------ particle view

    @property
    def particles(self) -> list[Particle]:
        p, q = self.model.p, self.model.q
        out = []
        for k in range(self._logw.size):
            kind = self._kind[k]
            if kind == 1:
                scales = NoiseScales.additive(p, q, int(self._comp[k]), float(self._prec[k]))
            elif kind == 2:
                scales = NoiseScales.innovative(p, q, int(self._comp[k]), float(self._prec[k]))
            else:
                scales = NoiseScales.typical(p, q)
            out.append(
                Particle(
                    GaussianState(self._mu[k].copy(), self._Sig[k].copy()),
                    float(self._logw[k]),
                    scales,
                    int(self._hor[k]),
                    self._hist[k],
                )
            )
        return out

    def normalised_weights(self) -> np.ndarray:
        return np.exp(self._logw - logsumexp(self._logw))

    # --------------------------------------------------------------------- step

    def step(self, y) -> AnomalyReport:
        model, cfg, hp, rng = self.model, self.cfg, self.cfg.hp, self.rng
        p, q, M = model.p, model.q, cfg.M
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (p,):
            raise ValueError(f"observation must have length {p}")
        if not np.all(np.isfinite(y)):
            raise ValueError("observation contains non-finite values")
        self.t += 1
        t = self.t
        logw_prev = self._logw
        n_prev = logw_prev.size

        # start chains from the previous particles and absorb y in every chain
        bank = self.bank
        first = len(bank)
        bank.add(self._mu, self._Sig)
        self._row_logw = np.concatenate([self._row_logw, logw_prev])
        self._row_hist = self._row_hist + self._hist
        z, F, Finv_z = bank.update(y, time=t)
        ages = bank.age
        rows1 = np.arange(first, first + n_prev)
        base1 = logw_prev + bank.loglik[rows1]
        typ_logw = base1 + self._log_typ

        # Every anomaly proposal is a "slot": a source row, a kind and a
        # component. Additive slots hang off the rows started this step;
        # innovative slots off every row whose age is in the horizon set.
        F1, Fz1 = F[rows1], Finv_z[rows1]
        s_add = np.diagonal(np.linalg.inv(F1), axis1=1, axis2=2)  # (n, p)
        member = self._member[np.minimum(ages, self._max_h)] & (ages <= self._max_h)[:, None]
        # components visible in one step but not sampled at horizon 1 still
        # need one-step draws for the predictive likelihood
        pred_only = (ages == 1)[:, None] & self._needs_pred[None, :]
        r_inn, j_inn = np.nonzero(member | pred_only)
        is_cand_inn = member[r_inn, j_inn]
        h_inn = ages[r_inn]
        nd_inn = np.where(is_cand_inn, M * self._nB[j_inn], float(M))

        n_add = n_prev * p
        r_add = np.repeat(rows1, p)
        i_add = np.tile(np.arange(p), n_prev)
        kind = np.concatenate([np.ones(n_add, dtype=int), np.full(r_inn.size, 2)])
        comp = np.concatenate([i_add, j_inn])
        row = np.concatenate([r_add, r_inn])
        hor = np.concatenate([np.ones(n_add, dtype=int), h_inn])
        is_cand = np.concatenate([np.ones(n_add, dtype=bool), is_cand_inn])
        n_draws = np.concatenate([np.full(n_add, float(M)), nd_inn])
        u = np.concatenate([Fz1.reshape(-1), bank.U[r_inn, j_inn]])
        sv = np.concatenate([s_add.reshape(-1), bank.Sdiag[r_inn, j_inn]])
        shape = np.concatenate([self._a[i_add], self._b[j_inn]])
        scale = np.concatenate([self._st[i_add], self._sh[j_inn]])
        noise = np.concatenate([self._sa[i_add], self._si[j_inn]])
        log_prior = np.concatenate([self._log_r[i_add], self._log_s[j_inn] + (h_inn - 1) * self._log_typ])
        base = self._row_logw[row] + bank.loglik[row]

        rate = gamma_rate(shape, scale, noise, u, sv)
        g = draw_unit_gamma(rng, np.repeat(shape + 0.5, M), np.repeat(rate, M))
        rep = lambda x: np.repeat(x, M)  # noqa: E731
        lw = anomaly_log_weight(
            g, rep(shape), rep(rate), rep(scale), rep(noise), rep(u), rep(sv),
            rep(base), rep(log_prior), rep(n_draws),
        )
        cand = rep(is_cand)
        all_logw = np.concatenate([typ_logw, lw[cand]])
        kinds = np.concatenate([np.zeros(n_prev, dtype=int), rep(kind)[cand]])
        comps = np.concatenate([np.full(n_prev, -1), rep(comp)[cand]])
        rows = np.concatenate([rows1, rep(row)[cand]])
        precs = np.concatenate([np.ones(n_prev), (rep(scale) * g)[cand]])
        hors = np.concatenate([np.ones(n_prev, dtype=int), rep(hor)[cand]])

        # one-step predictive terms, rescaled to the unstratified count M;
        # an invisible innovation leaves the one-step density unchanged
        visible = np.concatenate([np.ones(n_add, dtype=bool), self._col_visible[j_inn]])
        at1 = rep((hor == 1) & visible)
        pred_terms = [
            typ_logw,
            lw[at1] + np.log(rep(n_draws)[at1] / M),
            (base1[:, None] + self._log_s[None, ~self._col_visible]).reshape(-1),
        ]

        # predictive quantities over the previous particle set
        log_prev_total = logsumexp(logw_prev)
        pred_loglik = logsumexp(np.concatenate([np.ravel(a) for a in pred_terms])) - log_prev_total
        wprev = np.exp(logw_prev - log_prev_total)
        yhat = y[None, :] - z[rows1]
        pred_mean = wprev @ yhat
        dev = yhat - pred_mean
        pred_var = np.einsum("n,nij->ij", wprev, F1) + np.einsum("n,ni,nj->ij", wprev, dev, dev)

        # subsample and build the new particle set
        if not np.any(np.isfinite(all_logw)):
            raise DegenerateFilterError(f"all candidate weights vanished at time {t}")
        idx, new_logw = subsample(all_logw, cfg.N, rng)
        kind_k, comp_k, row_k = kinds[idx], comps[idx], rows[idx]
        prec_k, hor_k = precs[idx], hors[idx]
        n_new = idx.size
        mu = bank.m[row_k].copy()
        Sig = bank.P[row_k].copy()
        sel = np.flatnonzero(kind_k == 1)
        if sel.size:
            r_, i_ = row_k[sel], comp_k[sel]
            tau = self._sa[i_] / prec_k[sel]
            Finv_diag = s_add[r_ - first, i_]
            mu[sel], Sig[sel] = bank.states_with_additive(r_, i_, tau, Finv_diag, Finv_z[r_, i_])
        sel = np.flatnonzero(kind_k == 2)
        if sel.size:
            r_, j_ = row_k[sel], comp_k[sel]
            mu[sel], Sig[sel] = bank.states_with_innovative(r_, j_, self._si[j_] / prec_k[sel])
        Sig = 0.5 * (Sig + np.swapaxes(Sig, 1, 2))

        floor = t - cfg.window
        hist = []
        for k in range(n_new):
            hk = self._row_hist[row_k[k]]
            if kind_k[k] == 1:
                hk = hk + (AnomalyEvent(t, ADDITIVE, int(comp_k[k])),)
            elif kind_k[k] == 2:
                hk = hk + (AnomalyEvent(t + 1 - int(hor_k[k]), INNOVATIVE, int(comp_k[k])),)
            if hk and hk[0].time < floor:
                hk = tuple(ev for ev in hk if ev.time >= floor)
            hist.append(hk)

        self._mu, self._Sig, self._logw = mu, Sig, new_logw
        self._kind, self._comp, self._prec, self._hor = kind_k, comp_k, prec_k, hor_k
        self._hist = hist

        # retire chains that have reached the largest horizon
        keep = bank.age < self._max_h
        if not np.all(keep):
            bank.keep(keep)
            self._row_logw = self._row_logw[keep]
            self._row_hist = [hh for hh, kk in zip(self._row_hist, keep) if kk]

        w = np.exp(new_logw - logsumexp(new_logw))
        p_add = np.bincount(comp_k[kind_k == 1], weights=w[kind_k == 1], minlength=p)
        inn = kind_k == 2
        p_inn = np.bincount(comp_k[inn], weights=w[inn], minlength=q)
        lags = np.full(q, -1)
        for j in np.flatnonzero(p_inn > 0):
            m = inn & (comp_k == j)
            mass = np.bincount(hor_k[m] - 1, weights=w[m])
            lags[j] = int(np.argmax(mass))
        best = int(np.argmax(new_logw))
        report = AnomalyReport(
            time=t,
            p_additive=np.minimum(p_add, 1.0),
            p_innovative=np.minimum(p_inn, 1.0),
            map_particle_state=GaussianState(mu[best].copy(), Sig[best].copy()),
            predictive_log_lik=float(pred_loglik),
            predictive_mean=pred_mean,
            predictive_var=0.5 * (pred_var + pred_var.T),
            innovative_lag=lags,
        )
        report.flags = self._new_flags(w)
        return report

    def run(self, ys: Iterable) -> Iterator[AnomalyReport]:
        for y in ys:
            yield self.step(y)

    # ---------------------------------------------------------------- posteriors

    def event_posteriors(self, since: int | None = None, weights=None) -> dict[AnomalyEvent, float]:
        """Posterior probability of every retained anomaly annotation.

        ``since`` restricts to events dated at or after that time.
        """
        if weights is None:
            weights = self.normalised_weights()
        out: dict[AnomalyEvent, float] = {}
        for w, hist in zip(weights, self._hist):
            for ev in reversed(hist):
                if since is not None and ev.time < since:
                    break
                out[ev] = out.get(ev, 0.0) + float(w)
        return out

    def _new_flags(self, weights) -> list[AnomalyEvent]:
        since = self.t - max(self._max_h, 1)
        post = self.event_posteriors(since, weights)
        new = [
            ev for ev, pr in post.items()
            if pr > self.cfg.anomaly_threshold and ev not in self._flagged
        ]
        new.sort(key=lambda ev: (ev.time, ev.kind, ev.component))
        self._flagged.update(new)
        if len(self._flagged) > 10_000:
            self._flagged = {ev for ev in self._flagged if ev.time >= since}
        return new
