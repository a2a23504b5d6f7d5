import numpy as np
import pytest

from cebass.errors import ConfigError, DegenerateFilterError
from cebass.resampling import subsample, threshold


def test_threshold_solves_equation():
    rng = np.random.default_rng(0)
    for N in (1, 3, 10):
        w = rng.exponential(size=40) ** 3
        w /= w.sum()
        kappa, k = threshold(w, N)
        assert np.minimum(w / kappa, 1).sum() == pytest.approx(N)
        assert np.sum(w >= kappa) == k


def test_keeps_everything_when_few_candidates():
    logw = np.log([0.2, 0.3, 0.5])
    idx, new = subsample(logw, 5, np.random.default_rng(0))
    assert idx.tolist() == [0, 1, 2]
    assert np.allclose(new, logw)


def test_drops_zero_weight_candidates():
    logw = np.array([0.0, -np.inf, 0.0])
    idx, _ = subsample(logw, 5, np.random.default_rng(0))
    assert idx.tolist() == [0, 2]


def test_equal_weights_half_kept():
    N = 50
    logw = np.zeros(2 * N)
    counts = np.zeros(2 * N)
    reps = 2000
    rng = np.random.default_rng(1)
    for _ in range(reps):
        idx, new = subsample(logw, N, rng)
        assert idx.size == N
        # each survivor carries kappa times the total, i.e. twice its weight
        assert np.allclose(new, np.log(2.0))
        counts[idx] += 1
    assert np.allclose(counts / reps, 0.5, atol=0.05)


def test_dominant_candidate_always_kept():
    logw = np.log(np.r_[0.9, np.full(99, 0.1 / 99)])
    rng = np.random.default_rng(2)
    for _ in range(200):
        idx, new = subsample(logw, 5, rng)
        assert 0 in idx
        assert new[list(idx).index(0)] == pytest.approx(logw[0])


def test_unbiasedness():
    rng = np.random.default_rng(3)
    logw = np.log(rng.exponential(size=30) ** 2) + 50.0  # unnormalised scale
    f = np.sin(np.arange(30)) + 2
    target = np.sum(np.exp(logw - 50.0) * f)
    reps = 100_000
    est = np.empty(reps)
    for r in range(reps):
        idx, new = subsample(logw, 7, rng)
        est[r] = np.sum(np.exp(new - 50.0) * f[idx])
    se = est.std() / np.sqrt(reps)
    assert abs(est.mean() - target) < 3 * se


def test_output_size_and_order():
    logw = np.random.default_rng(4).standard_normal(100)
    idx, new = subsample(logw, 20, np.random.default_rng(5))
    assert idx.size == 20 and np.all(np.diff(idx) >= 0)
    assert np.all(np.isfinite(new))


def test_errors():
    with pytest.raises(ConfigError):
        subsample(np.zeros(3), 0, np.random.default_rng(0))
    with pytest.raises(DegenerateFilterError):
        subsample(np.full(3, -np.inf), 2, np.random.default_rng(0))
    with pytest.raises(DegenerateFilterError):
        subsample(np.array([0.0, np.nan]), 1, np.random.default_rng(0))
