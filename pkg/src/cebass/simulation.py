"""Simulation study: four linear-Gaussian models with injected anomalies.

Each (model, regime) cell generates ``T`` observations with anomalies at
fixed times. An anomaly replaces the realised noise product by a fixed value
(for example the additive noise term at ``t = 100`` is set to exactly 10), so
the injected magnitudes do not depend on the seed.

Filters are scored by their average one-step predictive log density and
average squared prediction error over the non-anomalous time points.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing as mp
from collections import defaultdict
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .baselines import AO, IO, HuberConfig, classical_kf, huber_filter
from .calibration import steady_state
from .engine import CEBASS, FilterConfig
from .errors import ConfigError
from .model import ADDITIVE, INNOVATIVE, GaussianState, StateSpaceModel

log = logging.getLogger(__name__)

ANOMALY_TIMES = (100, 300, 600, 900)
REGIMES = ("none", "AO", "IO", "both")
FILTERS = ("kf", "huber_ao", "huber_io", "cebass")

_RW_TREND_A = [[1.0, 1.0], [0.0, 1.0]]


def build_model(model_id: int) -> StateSpaceModel:
    if model_id == 1:
        return StateSpaceModel(A=[[1.0]], C=[[1.0]], Sigma_A=[1.0], Sigma_I=[0.01])
    if model_id == 2:
        return StateSpaceModel(A=[[1.0]], C=[[1.0], [1.0]], Sigma_A=[1.0, 1.0], Sigma_I=[0.01])
    if model_id == 3:
        return StateSpaceModel(A=_RW_TREND_A, C=[[1.0, 0.0]], Sigma_A=[1.0], Sigma_I=[0.01, 1e-4])
    if model_id == 4:
        return StateSpaceModel(A=_RW_TREND_A, C=np.eye(2), Sigma_A=[1.0, 1.0], Sigma_I=[0.01, 1e-4])
    raise ConfigError(f"unknown model id {model_id}")


# (kind, component) per anomaly time, keyed by model and regime
_SCHEDULES = {
    1: {
        "AO": [(ADDITIVE, 0)] * 4,
        "IO": [(INNOVATIVE, 0)] * 4,
        "both": [(ADDITIVE, 0), (INNOVATIVE, 0), (INNOVATIVE, 0), (ADDITIVE, 0)],
    },
    2: {
        "AO": [(ADDITIVE, 0), (ADDITIVE, 1), (ADDITIVE, 1), (ADDITIVE, 0)],
        "IO": [(INNOVATIVE, 0)] * 4,
        "both": [(ADDITIVE, 0), (INNOVATIVE, 0), (INNOVATIVE, 0), (ADDITIVE, 1)],
    },
    3: {
        "AO": [(ADDITIVE, 0)] * 4,
        "IO": [(INNOVATIVE, 1), (INNOVATIVE, 0), (INNOVATIVE, 1), (INNOVATIVE, 0)],
        "both": [(ADDITIVE, 0), (INNOVATIVE, 0), (INNOVATIVE, 1), (ADDITIVE, 0)],
    },
}
_SCHEDULES[4] = _SCHEDULES[3]

# realised noise products substituted at anomaly times
_MAGNITUDES = {
    1: {ADDITIVE: [10.0], INNOVATIVE: [10.0]},
    2: {ADDITIVE: [10.0, 10.0], INNOVATIVE: [10.0]},
    3: {ADDITIVE: [30.0], INNOVATIVE: [100 * 0.1, 500 * 0.01]},
    4: {ADDITIVE: [30.0, 30.0], INNOVATIVE: [100 * 0.1, 500 * 0.01]},
}

# extra post-anomaly steps dropped from the squared-error average
_MSE_EXTRA = {1: 1, 2: 0, 3: 2, 4: 0}


@dataclass(frozen=True)
class Injection:
    time: int
    kind: str
    component: int
    value: float


@dataclass(frozen=True)
class Scenario:
    model_id: int
    regime: str = "none"
    T: int = 1000
    anomaly_times: tuple[int, ...] = ANOMALY_TIMES
    seed: int = 0

    def __post_init__(self):
        if self.model_id not in (1, 2, 3, 4):
            raise ConfigError(f"model_id must be 1-4, got {self.model_id}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.regime != "none" and any(not 1 <= t <= self.T for t in self.anomaly_times):
            raise ConfigError("anomaly times must lie within 1..T")

    @property
    def model(self) -> StateSpaceModel:
        return build_model(self.model_id)

    def injections(self) -> list[Injection]:
        if self.regime == "none":
            return []
        sched = _SCHEDULES[self.model_id][self.regime]
        mags = _MAGNITUDES[self.model_id]
        return [
            Injection(t, kind, comp, mags[kind][comp])
            for t, (kind, comp) in zip(self.anomaly_times, sched)
        ]

    def excluded_times(self) -> set[int]:
        return {inj.time for inj in self.injections()}

    def mse_excluded_times(self) -> set[int]:
        extra = _MSE_EXTRA[self.model_id]
        out = set()
        for t in self.excluded_times():
            out.update(range(t, t + extra + 1))
        return out


def generate(scenario: Scenario, rng: np.random.Generator, injections: Sequence[Injection] | None = None):
    """Simulate ``scenario``.

    Returns ``(ys, xs, labels)`` with ``ys`` of shape ``(T, p)``, ``xs`` of
    shape ``(T, q)`` and ``labels`` the list of injections actually applied.
    ``injections`` overrides the scenario's schedule.
    """
    model = scenario.model
    p, q, T = model.p, model.q, scenario.T
    inj = scenario.injections() if injections is None else list(injections)
    eps = rng.standard_normal((T, p)) * np.sqrt(model.sigma_a)
    nu = rng.standard_normal((T, q)) * np.sqrt(model.sigma_i)
    for a in inj:
        if a.kind == ADDITIVE:
            eps[a.time - 1, a.component] = a.value
        else:
            nu[a.time - 1, a.component] = a.value
    xs = np.empty((T, q))
    x = np.zeros(q)
    for t in range(T):
        x = model.A @ x + nu[t]
        xs[t] = x
    ys = xs @ model.C.T + eps
    return ys, xs, inj


@dataclass
class MetricResult:
    avg_pred_log_lik: float
    avg_pred_mse: float
    excluded_times: set = field(default_factory=set)
    mse_excluded_times: set = field(default_factory=set)


def evaluate(pred_means, pred_logliks, ys, scenario: Scenario) -> MetricResult:
    """Average predictive log density and squared error off the anomalies."""
    pred_means = np.asarray(pred_means, dtype=float).reshape(len(ys), -1)
    pred_logliks = np.asarray(pred_logliks, dtype=float)
    ys = np.asarray(ys, dtype=float).reshape(len(ys), -1)
    T = len(ys)
    ex = scenario.excluded_times()
    ex_mse = scenario.mse_excluded_times()
    times = np.arange(1, T + 1)
    keep_ll = ~np.isin(times, list(ex))
    keep_mse = ~np.isin(times, list(ex_mse))
    sq = np.sum((ys - pred_means) ** 2, axis=1)
    return MetricResult(
        float(np.mean(pred_logliks[keep_ll])),
        float(np.mean(sq[keep_mse])),
        ex,
        ex_mse,
    )


@dataclass
class SuiteConfig:
    models: tuple[int, ...] = (1, 2, 3, 4)
    regimes: tuple[str, ...] = REGIMES
    reps: int = 50
    seed: int = 0
    T: int = 1000
    N: int = 20
    M: int = 1
    huber_clip: float = 1.345
    filters: tuple[str, ...] = FILTERS


# external filters: callable(ys, model, prior, seed) -> (pred_means, pred_logliks)
ExternalFilter = Callable[[np.ndarray, StateSpaceModel, GaussianState, int], tuple]


def run_filter(name: str, ys, model: StateSpaceModel, prior: GaussianState, cfg: SuiteConfig, seed: int,
               external: dict[str, ExternalFilter] | None = None):
    """Run one filter; returns ``(pred_means, pred_logliks)``."""
    if external and name in external:
        return external[name](ys, model, prior, seed)
    if name == "kf":
        outs = list(classical_kf(ys, model, prior))
    elif name == "huber_ao":
        outs = list(huber_filter(ys, model, HuberConfig(cfg.huber_clip, AO), prior))
    elif name == "huber_io":
        outs = list(huber_filter(ys, model, HuberConfig(cfg.huber_clip, IO), prior))
    elif name == "cebass":
        fcfg = FilterConfig.calibrated(model, N=cfg.N, M=cfg.M, seed=seed)
        f = CEBASS(model, fcfg, prior)
        means, lls = [], []
        for rep in f.run(ys):
            means.append(rep.predictive_mean)
            lls.append(rep.predictive_log_lik)
        return np.array(means), np.array(lls)
    else:
        raise ConfigError(f"unknown filter {name!r}")
    return np.array([o.pred_mean for o in outs]), np.array([o.pred_loglik for o in outs])


def replication_seeds(seed: int, model_id: int, regime: str, rep: int) -> tuple[np.random.Generator, int]:
    """Data generator and filter seed for one replication.

    Derived from the cell and replication index alone, so results do not
    depend on execution order or the number of workers.
    """
    ss = np.random.SeedSequence(seed, spawn_key=(model_id, REGIMES.index(regime), rep))
    data_ss, filt_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(filt_ss.generate_state(1)[0])


def scaled_anomaly_times(T: int) -> tuple[int, ...]:
    """The standard anomaly times stretched to a series of length ``T``."""
    return tuple(max(1, t * T // 1000) for t in ANOMALY_TIMES)


def run_replication(task):
    cfg, model_id, regime, rep, external = task
    scen = Scenario(model_id, regime, T=cfg.T, anomaly_times=scaled_anomaly_times(cfg.T), seed=rep)
    model = scen.model
    rng, fseed = replication_seeds(cfg.seed, model_id, regime, rep)
    ys, _, _ = generate(scen, rng)
    prior = GaussianState(np.zeros(model.q), steady_state(model).Sigma_limit)
    rows = []
    for name in cfg.filters:
        means, lls = run_filter(name, ys, model, prior, cfg, fseed, external)
        res = evaluate(means, lls, ys, scen)
        rows.append(dict(replication=rep, filter=name, model=model_id, regime=regime,
                         metric="pred_loglik", value=res.avg_pred_log_lik))
        rows.append(dict(replication=rep, filter=name, model=model_id, regime=regime,
                         metric="pred_mse", value=res.avg_pred_mse))
    return rows


def run_suite(cfg: SuiteConfig, workers: int = 1, external: dict[str, ExternalFilter] | None = None,
              progress: Callable[[int, int], None] | None = None) -> list[dict]:
    """Run every (model, regime, replication) and return tidy metric rows.

    Row order is fixed by (model, regime, replication, filter, metric)
    regardless of ``workers``.
    """
    if cfg.reps < 1:
        raise ConfigError("reps must be at least 1")
    tasks = [
        (cfg, m, r, rep, external)
        for m in cfg.models for r in cfg.regimes for rep in range(cfg.reps)
    ]
    rows: list[dict] = []
    if workers <= 1:
        for k, task in enumerate(tasks):
            rows.extend(run_replication(task))
            if progress:
                progress(k + 1, len(tasks))
    else:
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers) as pool:
            for k, out in enumerate(pool.imap(run_replication, tasks, chunksize=1)):
                rows.extend(out)
                if progress:
                    progress(k + 1, len(tasks))
    return rows


def summarise(rows: list[dict]) -> list[dict]:
    """Per-cell means and standard errors of each filter and metric."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r["model"], r["regime"], r["filter"], r["metric"])].append(r["value"])
    out = []
    for (m, reg, f, met), vals in groups.items():
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append(dict(model=m, regime=reg, filter=f, metric=met, n=v.size, mean=float(v.mean()), se=se))
    return out


TIDY_FIELDS = ("replication", "filter", "model", "regime", "metric", "value")
SUMMARY_FIELDS = ("model", "regime", "filter", "metric", "n", "mean", "se")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path, rows: list[dict], fields: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])
