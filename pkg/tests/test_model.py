import numpy as np
import pytest

from cebass.errors import SingularCovarianceError
from cebass.model import (
    GaussianState,
    NoiseScales,
    StateSpaceModel,
    cholesky,
    kalman_filter,
    kf_update,
    log_gaussian_density,
    logsumexp,
    predictive_variance,
)
from oracles import stacked_filter


def trend_model():
    return StateSpaceModel(A=[[1.0, 1.0], [0.0, 1.0]], C=[[1.0, 0.0]], Sigma_A=[1.0], Sigma_I=[0.01, 1e-4])


def test_model_accepts_diagonal_vectors_and_matrices():
    m1 = StateSpaceModel(A=[[1.0]], C=[[1.0]], Sigma_A=[2.0], Sigma_I=[0.5])
    m2 = StateSpaceModel(A=np.eye(1), C=np.eye(1), Sigma_A=np.diag([2.0]), Sigma_I=np.diag([0.5]))
    assert np.array_equal(m1.Sigma_A, m2.Sigma_A)
    assert m1.p == 1 and m1.q == 1
    assert m1.sigma_a.tolist() == [2.0]


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(A=[[1.0]], C=[[1.0]], Sigma_A=[-1.0], Sigma_I=[1.0]),
        dict(A=[[1.0]], C=[[1.0]], Sigma_A=[1.0], Sigma_I=[0.0]),
        dict(A=[[1.0, 0.0]], C=[[1.0]], Sigma_A=[1.0], Sigma_I=[1.0]),
        dict(A=[[1.0]], C=[[1.0, 1.0]], Sigma_A=[1.0], Sigma_I=[1.0]),
        dict(A=np.eye(2), C=np.eye(2), Sigma_A=[[1.0, 0.1], [0.1, 1.0]], Sigma_I=[1.0, 1.0]),
    ],
)
def test_model_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        StateSpaceModel(**kwargs)


def test_noise_scales():
    typ = NoiseScales.typical(2, 3)
    assert typ.is_typical() and np.all(typ.V == 1) and np.all(typ.W == 1)
    add = NoiseScales.additive(2, 3, 1, 0.25)
    assert add.V.tolist() == [1.0, 5.0] and np.all(add.W == 1)
    inn = NoiseScales.innovative(2, 3, 2, 2.0)
    assert inn.W.tolist() == [1.0, 1.0, 1.5]
    with pytest.raises(ValueError):
        NoiseScales.additive(2, 3, 0, 0.0)


def test_cholesky_jitter_and_singular():
    fac = cholesky(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.isfinite(fac.logdet)
    with pytest.raises(SingularCovarianceError) as info:
        cholesky(np.array([[-1.0, 0.0], [0.0, 1.0]]), time=7)
    assert "7" in str(info.value)


def test_log_gaussian_density_matches_scipy():
    from scipy import stats

    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    x = np.array([0.4, -1.2])
    assert log_gaussian_density(x, np.zeros(2), S) == pytest.approx(
        stats.multivariate_normal(np.zeros(2), S).logpdf(x), abs=1e-12
    )


def test_logsumexp():
    a = np.array([-1000.0, -1001.0, -np.inf])
    assert logsumexp(a) == pytest.approx(-1000.0 + np.log1p(np.exp(-1.0)))
    assert logsumexp(np.array([])) == -np.inf
    assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf


def test_predictive_variance():
    m = trend_model()
    st = GaussianState(np.zeros(2), np.diag([0.5, 0.1]))
    P = m.A @ st.Sigma @ m.A.T + m.Sigma_I
    assert predictive_variance(st, m) == pytest.approx(m.C @ P @ m.C.T + m.Sigma_A)


def test_kalman_filter_matches_stacked_oracle():
    m = trend_model()
    rng = np.random.default_rng(3)
    ys = rng.standard_normal((6, 1)) * 2
    mu0, S0 = np.array([0.3, -0.1]), np.diag([0.7, 0.05])
    total = 0.0
    for st, ll in kalman_filter(ys, m, GaussianState(mu0, S0)):
        total += ll
    mean, cov, ll_ref = stacked_filter(ys, m.A, m.C, m.sigma_a, m.sigma_i, mu0, S0)
    assert np.allclose(st.mu, mean, atol=1e-10)
    assert np.allclose(st.Sigma, cov, atol=1e-10)
    assert total == pytest.approx(ll_ref, abs=1e-9)


def test_inflated_update_matches_stacked_oracle():
    m = StateSpaceModel(A=np.eye(2), C=np.eye(2), Sigma_A=[1.0, 2.0], Sigma_I=[0.1, 0.2])
    ys = np.array([[1.0, -2.0], [8.0, 0.5]])
    st = GaussianState(np.zeros(2), np.eye(2))
    scales = [NoiseScales.additive(2, 2, 0, 0.2), NoiseScales.innovative(2, 2, 1, 0.05)]
    total = 0.0
    for y, sc in zip(ys, scales):
        st, ll = kf_update(y, st, m, sc)
        total += ll
    r_scale = np.stack([sc.V for sc in scales])
    q_scale = np.stack([sc.W for sc in scales])
    mean, cov, ll_ref = stacked_filter(ys, m.A, m.C, m.sigma_a, m.sigma_i, np.zeros(2), np.eye(2), r_scale, q_scale)
    assert np.allclose(st.mu, mean, atol=1e-10)
    assert np.allclose(st.Sigma, cov, atol=1e-10)
    assert total == pytest.approx(ll_ref, abs=1e-9)


def test_update_keeps_covariance_symmetric_psd():
    m = trend_model()
    st = GaussianState(np.zeros(2), np.eye(2))
    rng = np.random.default_rng(0)
    for y in rng.standard_normal(200) * 5:
        st, _ = kf_update([y], st, m)
        assert np.max(np.abs(st.Sigma - st.Sigma.T)) <= 1e-10
        assert np.linalg.eigvalsh(st.Sigma).min() >= -1e-8 * np.trace(st.Sigma)
