import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cebass.model import ADDITIVE, INNOVATIVE, TYPICAL, GaussianState, StateSpaceModel, predictive_variance
from cebass.proposals import (
    MIN_PROBABILITY,
    HyperParams,
    Predictive,
    anomaly_log_weight,
    autocorrelation_adjusted,
    gamma_rate,
    log_prior_over_proposal,
    rank_one_loglik_correction,
    sample_additive_component,
    sample_innovative_component,
    sample_particles,
)
from oracles import anomaly_target_logpdf, proposal_logpdf

GRID = np.logspace(-3, 3, 13)


def hp1(r=1e-3, s=1e-3, a=3.0, st=1.0, sh=1.0):
    return HyperParams([r], [s], [a], [a], [st], [sh])


def weight_ratio_spread(z, S, c, noise, scale, shape, prob, n_draws=1):
    """max/min over the grid of w(x) q(x) / target(x) and its mean level."""
    S = np.atleast_2d(S)
    z = np.atleast_1d(z)
    c = np.atleast_1d(c).astype(float)
    Sinv_c = np.linalg.solve(S, c)
    s, u = float(c @ Sinv_c), float(Sinv_c @ z)
    base = stats.multivariate_normal(np.zeros(len(z)), S).logpdf(z)
    rate = gamma_rate(shape, scale, noise, u, s)
    logs = []
    for x in GRID:
        lw = anomaly_log_weight(x / scale, shape, rate, scale, noise, u, s, base, np.log(prob), n_draws)
        logs.append(
            lw
            + proposal_logpdf(x, z, S, c, noise, scale, shape)
            - anomaly_target_logpdf(x, z, S, c, noise, scale, shape, prob)
        )
    logs = np.array(logs)
    return np.exp(logs.max() - logs.min()) - 1, logs.mean()


@pytest.mark.parametrize("z", [0.1, 3.0, 30.0])
def test_additive_weight_is_exact_scalar(z):
    # A = C = Sigma_A = 1, Sigma_I = 0.1 with a flat prior state covariance
    S_hat = 1.0 * 0.5 * 1.0 + 0.1 + 1.0
    spread, level = weight_ratio_spread(z, S_hat, [1.0], 1.0, 0.9, 3.0, 1e-3, n_draws=1)
    assert spread < 1e-6
    assert level == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("z", [0.1, 3.0, 30.0])
def test_innovative_weight_is_exact_scalar(z):
    S_hat = 1.6
    spread, level = weight_ratio_spread(z, S_hat, [1.0], 0.1, 0.09, 3.0, 2e-3, n_draws=4)
    assert spread < 1e-6
    assert level == pytest.approx(-np.log(4), abs=1e-6)


def test_weights_exact_multivariate():
    S = np.array([[2.0, 0.4, 0.1], [0.4, 1.5, -0.2], [0.1, -0.2, 1.1]])
    z = np.array([4.0, -1.0, 12.0])
    for c, noise in [(np.array([0.0, 0.0, 1.0]), 0.7), (np.array([1.0, 2.0, 0.0]), 0.05)]:
        spread, _ = weight_ratio_spread(z, S, c, noise, 0.6, 2.5, 1e-4)
        assert spread < 1e-6


def test_rank_one_correction_matches_dense():
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    c = np.array([1.0, -1.0])
    z = np.array([3.0, 1.0])
    tau = 2.5
    Sinv_c = np.linalg.solve(S, c)
    s, u = c @ Sinv_c, Sinv_c @ z
    dense = stats.multivariate_normal(np.zeros(2), S + tau * np.outer(c, c)).logpdf(z)
    base = stats.multivariate_normal(np.zeros(2), S).logpdf(z)
    assert base + rank_one_loglik_correction(tau, u, s) == pytest.approx(dense, abs=1e-12)


def test_prior_over_proposal_matches_scipy():
    shape, rate, g = 3.0, 7.5, 0.37
    expected = stats.gamma.logpdf(g, shape, scale=1 / shape) - stats.gamma.logpdf(g, shape + 0.5, scale=1 / rate)
    assert log_prior_over_proposal(g, shape, rate) == pytest.approx(expected, abs=1e-12)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams([0.6], [0.5], [3], [3], [1], [1])
    with pytest.raises(ValueError):
        HyperParams([0.0], [0.1], [3], [3], [1], [1])
    with pytest.raises(ValueError):
        HyperParams([0.1], [0.1], [3], [3], [1], [0])
    with pytest.raises(ValueError):
        HyperParams([0.1, 0.1], [0.1], [3], [3], [1], [1])
    hp = HyperParams([0.1, 0.1], [0.1], 3, 3, [1, 1], [1])
    assert hp.a.tolist() == [3.0, 3.0]
    assert hp.log_typical == pytest.approx(np.log(0.7))


def test_autocorrelation_adjustment():
    assert autocorrelation_adjusted([0.01], 0.5)[0] == pytest.approx(1e-4)
    assert autocorrelation_adjusted([0.01], 0.0)[0] == pytest.approx(0.01)
    assert autocorrelation_adjusted([5e-4], 0.99)[0] == MIN_PROBABILITY
    with pytest.raises(ValueError):
        autocorrelation_adjusted([0.01], 1.0)


def scalar_setup(z=5.0):
    m = StateSpaceModel(A=[[1.0]], C=[[1.0]], Sigma_A=[1.0], Sigma_I=[0.1])
    st_ = GaussianState([0.0], [[0.5]])
    return m, st_, np.array([z])


def test_sample_particles_layout_and_determinism():
    m, st_, y = scalar_setup()
    hp = hp1()
    d1 = sample_particles(st_, y, m, hp, 3, np.random.default_rng(1))
    d2 = sample_particles(st_, y, m, hp, 3, np.random.default_rng(1))
    assert len(d1) == 1 + 3 * (m.p + m.q)
    assert [d.scales.kind for d in d1] == [TYPICAL] + [ADDITIVE] * 3 + [INNOVATIVE] * 3
    assert [d.log_weight for d in d1] == [d.log_weight for d in d2]
    pred = Predictive.from_state(st_, y, m)
    assert d1[0].log_weight == pytest.approx(hp.log_typical + pred.loglik)
    for d in d1[1:]:
        assert np.isfinite(d.log_weight)


def test_component_samplers_weight_matches_formula():
    m, st_, y = scalar_setup(z=8.0)
    hp = hp1(st=0.9, sh=0.09)
    pred = Predictive.from_state(st_, y, m)
    S = predictive_variance(st_, m)
    d = sample_additive_component(0, pred, m, hp, 2, np.random.default_rng(5))
    x = d.scales.precision
    target = anomaly_target_logpdf(x, pred.z, S, [1.0], 1.0, 0.9, 3.0, 1e-3)
    q = proposal_logpdf(x, pred.z, S, [1.0], 1.0, 0.9, 3.0)
    assert d.log_weight == pytest.approx(target - q - np.log(2), abs=1e-9)
    d = sample_innovative_component(0, pred, m.C, m, hp, 1, np.random.default_rng(5))
    x = d.scales.precision
    target = anomaly_target_logpdf(x, pred.z, S, [1.0], 0.1, 0.09, 3.0, 1e-3)
    q = proposal_logpdf(x, pred.z, S, [1.0], 0.1, 0.09, 3.0)
    assert d.log_weight == pytest.approx(target - q, abs=1e-9)


def test_innovative_zero_column_raises():
    from cebass.errors import ZeroColumnError

    m = StateSpaceModel(A=[[1.0, 1.0], [0.0, 1.0]], C=[[1.0, 0.0]], Sigma_A=[1.0], Sigma_I=[0.01, 1e-4])
    st_ = GaussianState(np.zeros(2), np.eye(2))
    pred = Predictive.from_state(st_, [1.0], m)
    hp = HyperParams([1e-3], [1e-3, 1e-3], 3, 3, [1.0], [1.0, 1.0])
    with pytest.raises(ZeroColumnError):
        sample_innovative_component(1, pred, m.C, m, hp, 1, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(z=st.floats(-1e8, 1e8), seed=st.integers(0, 2**31))
def test_weights_finite_for_extreme_residuals(z, seed):
    m, st_, _ = scalar_setup()
    draws = sample_particles(st_, np.array([z]), m, hp1(st=0.9, sh=0.09), 2, np.random.default_rng(seed))
    for d in draws:
        assert np.isfinite(d.log_weight)
        if d.scales.precision is not None:
            assert d.scales.precision > 0
