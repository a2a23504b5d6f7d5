import numpy as np
import pytest

from cebass.baselines import classical_kf
from cebass.calibration import steady_state
from cebass.engine import CEBASS, AnomalyEvent, AnomalyReport, FilterConfig, Particle, anomaly_posteriors
from cebass.errors import ConfigError
from cebass.model import ADDITIVE, INNOVATIVE, GaussianState, NoiseScales, StateSpaceModel
from reference_filter import ReferenceFilter

EX1 = StateSpaceModel(A=[[1.0]], C=[[1.0]], Sigma_A=[1.0], Sigma_I=[0.01])
EX2 = StateSpaceModel(A=[[1.0, 1.0], [0.0, 1.0]], C=[[1.0, 0.0]], Sigma_A=[1.0], Sigma_I=[0.01, 1e-4])
M4 = StateSpaceModel(A=[[1.0, 1.0], [0.0, 1.0]], C=np.eye(2), Sigma_A=[1.0, 1.0], Sigma_I=[0.01, 1e-4])


def simulate(model, T, seed, jumps=(), spikes=()):
    """Gaussian data with innovative jumps {t: (j, size)} and additive spikes."""
    rng = np.random.default_rng(seed)
    x = np.zeros(model.q)
    ys = []
    jumps, spikes = dict(jumps), dict(spikes)
    for t in range(1, T + 1):
        x = model.A @ x + rng.standard_normal(model.q) * np.sqrt(model.sigma_i)
        if t in jumps:
            j, size = jumps[t]
            x[j] += size
        y = model.C @ x + rng.standard_normal(model.p) * np.sqrt(model.sigma_a)
        if t in spikes:
            i, size = spikes[t]
            y[i] += size
        ys.append(y)
    return np.array(ys)


def default_prior(model):
    return GaussianState(np.zeros(model.q), steady_state(model).Sigma_limit)


@pytest.mark.parametrize(
    "model,horizons,N,M,data",
    [
        (EX1, None, 5, 1, dict(jumps={10: (0, 6.0)}, spikes={20: (0, 10.0)})),
        (EX2, [{1, 2, 3}, {2, 3}], 6, 2, dict(jumps={12: (1, 1.0)}, spikes={25: (0, 12.0)})),
        (M4, [{1, 2}, {1, 3}], 4, 1, dict(jumps={8: (0, 8.0)}, spikes={15: (1, 10.0)})),
    ],
)
def test_engine_matches_dense_reference(model, horizons, N, M, data):
    cfg = FilterConfig.calibrated(model, N=N, M=M, horizons=horizons, r=0.01, s=0.01, seed=11)
    prior = default_prior(model)
    ys = simulate(model, 35, 3, **data)
    eng = CEBASS(model, cfg, prior)
    ref = ReferenceFilter(model, cfg, prior)
    for y in ys:
        rep = eng.step(y)
        states, logw, pred_ll, _ = ref.step(y)
        assert rep.predictive_log_lik == pytest.approx(pred_ll, abs=1e-8)
        assert np.allclose(eng._logw, logw, atol=1e-8)
        for k, st in enumerate(states):
            assert np.allclose(eng._mu[k], st.mu, atol=1e-7)
            assert np.allclose(eng._Sig[k], st.Sigma, atol=1e-7)


def test_reduces_to_kalman_filter():
    cfg = FilterConfig.calibrated(EX1, N=1, M=1, r=1e-12, s=1e-12)
    prior = default_prior(EX1)
    ys = simulate(EX1, 100, 0)
    eng = CEBASS(EX1, cfg, prior)
    for y, out in zip(ys, classical_kf(ys, EX1, prior)):
        rep = eng.step(y)
        assert rep.map_particle_state.mu[0] == pytest.approx(out.state.mu[0], abs=1e-10)
        assert rep.predictive_log_lik == pytest.approx(out.pred_loglik, abs=1e-8)
        assert rep.predictive_mean[0] == pytest.approx(out.pred_mean[0], abs=1e-10)


def test_weights_normalise():
    cfg = FilterConfig.calibrated(EX2, N=10, M=2, horizons=[{1, 2, 3}, {2, 3}])
    eng = CEBASS(EX2, cfg)
    for y in simulate(EX2, 30, 1, spikes={10: (0, 15.0)}):
        eng.step(y)
        w = eng.normalised_weights()
        assert w.sum() == pytest.approx(1.0)
        assert len(eng.particles) <= 10
        for pt in eng.particles:
            assert np.isfinite(pt.log_weight)
            assert pt.horizon == 1 or pt.horizon in cfg.horizons[pt.last_scales.index]


def test_single_step_horizons_are_default_for_example1():
    ys = simulate(EX1, 40, 2, jumps={15: (0, 6.0)})
    a = CEBASS(EX1, FilterConfig.calibrated(EX1, N=8, seed=4))
    b = CEBASS(EX1, FilterConfig.calibrated(EX1, N=8, seed=4, horizons=[{1}]))
    for y in ys:
        ra, rb = a.step(y), b.step(y)
        assert ra.predictive_log_lik == rb.predictive_log_lik
        assert np.array_equal(ra.p_innovative, rb.p_innovative)


def test_deterministic_given_seed():
    ys = simulate(M4, 40, 5, spikes={20: (0, 12.0)})
    runs = []
    for _ in range(2):
        eng = CEBASS(M4, FilterConfig.calibrated(M4, N=10, seed=9))
        runs.append([(r.predictive_log_lik, r.flag_string()) for r in eng.run(ys)])
    assert runs[0] == runs[1]


def test_predictive_moments_match_mixture_monte_carlo():
    model = M4
    cfg = FilterConfig.calibrated(model, N=10, M=1, r=0.02, s=0.02, seed=1)
    eng = CEBASS(model, cfg)
    ys = simulate(model, 20, 8, jumps={12: (0, 6.0)})
    for y in ys[:-1]:
        eng.step(y)
    w = eng.normalised_weights()
    mus, Sigs = eng._mu.copy(), eng._Sig.copy()
    rep = eng.step(ys[-1])
    rng = np.random.default_rng(0)
    n = 200_000
    k = rng.choice(w.size, size=n, p=w)
    L = np.linalg.cholesky(Sigs)[k]
    x = mus[k] + np.einsum("nij,nj->ni", L, rng.standard_normal((n, 2)))
    x = x @ model.A.T + rng.standard_normal((n, 2)) * np.sqrt(model.sigma_i)
    ysim = x @ model.C.T + rng.standard_normal((n, 2)) * np.sqrt(model.sigma_a)
    se = ysim.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(ysim.mean(axis=0) - rep.predictive_mean) < 4 * se)
    assert np.allclose(np.cov(ysim.T), rep.predictive_var, atol=0.015)


def test_additive_spike_and_trend_change_are_flagged():
    cfg = FilterConfig.calibrated(
        EX2, N=40, horizons=[set(range(1, 16)), set(range(2, 16))], seed=2
    )
    eng = CEBASS(EX2, cfg)
    ys = simulate(EX2, 120, 4, jumps={80: (1, 2.0)}, spikes={40: (0, 15.0)})
    flags = [ev for rep in eng.run(ys) for ev in rep.flags]
    assert AnomalyEvent(40, ADDITIVE, 0) in flags
    trend = [ev for ev in flags if ev.kind == INNOVATIVE and ev.component == 1]
    assert trend and all(abs(ev.time - 80) <= 3 for ev in trend)
    # no event is flagged twice
    assert len(flags) == len(set(flags))


def test_flag_string_format():
    st = GaussianState([0.0], [[1.0]])
    rep = AnomalyReport(10, np.zeros(1), np.zeros(1), st, 0.0, np.zeros(1), np.ones((1, 1)))
    assert rep.flag_string() == "none"
    rep.flags = [AnomalyEvent(10, ADDITIVE, 0), AnomalyEvent(8, INNOVATIVE, 1), AnomalyEvent(9, ADDITIVE, 1)]
    assert rep.flag_string() == "add:1;inn:2@2;add:2@1"


def test_anomaly_posteriors_examples():
    st = GaussianState([0.0, 0.0], np.eye(2))
    add2 = Particle(st, 0.0, NoiseScales.additive(2, 2, 1, 0.5))
    assert anomaly_posteriors([add2], 5, 2, 2)[0].tolist() == [0.0, 1.0]
    typ = Particle(st, 0.0, NoiseScales.typical(2, 2))
    add1 = Particle(st, 0.0, NoiseScales.additive(2, 2, 0, 0.5))
    p_add, p_inn, _ = anomaly_posteriors([add1, typ], 5, 2, 2)
    assert p_add.tolist() == pytest.approx([0.5, 0.0])
    inn = Particle(st, np.log(3.0), NoiseScales.innovative(2, 2, 0, 0.1), horizon=3)
    p_add, p_inn, lags = anomaly_posteriors([inn, typ], 5, 2, 2)
    assert p_inn.tolist() == pytest.approx([0.75, 0.0])
    assert lags.tolist() == [2, -1]


def test_history_window_limits_annotations():
    cfg = FilterConfig.calibrated(EX1, N=5, seed=0, history_window=10)
    eng = CEBASS(EX1, cfg)
    for y in simulate(EX1, 40, 0, spikes={5: (0, 20.0)}):
        eng.step(y)
    assert all(ev.time >= 30 for pt in eng.particles for ev in pt.history)


def test_input_validation():
    eng = CEBASS(M4, FilterConfig.calibrated(M4, N=3))
    with pytest.raises(ValueError):
        eng.step([1.0])
    with pytest.raises(ValueError):
        eng.step([1.0, np.nan])
    with pytest.raises(ConfigError):
        FilterConfig.calibrated(M4, N=0)
    with pytest.raises(ConfigError):
        FilterConfig.calibrated(EX1, M=0)
    with pytest.raises(ConfigError):
        CEBASS(EX1, FilterConfig.calibrated(M4))


def test_extreme_residual_recovers():
    eng = CEBASS(EX1, FilterConfig.calibrated(EX1, N=20, seed=3))
    ys = simulate(EX1, 30, 6)
    ys[10, 0] += 1e6
    for t, y in enumerate(ys, start=1):
        rep = eng.step(y)
        assert np.all(np.isfinite(eng._logw))
        if t >= 14:
            assert abs(rep.map_particle_state.mu[0] - y[0]) < 10
