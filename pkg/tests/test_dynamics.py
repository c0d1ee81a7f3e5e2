import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collapselab.dynamics import (
    MixtureParams,
    Schedule,
    TPTParams,
    aggregate_beta,
    buffer_mean_error_bound,
    decay_factor,
    ood_mean_at,
    ood_variance_bounds,
    pi_from_buffer,
    predicted_snr_ood,
    predicted_snr_replay,
    replay_ratio_sq,
    sample_mixture,
    sample_ood,
)
from collapselab.geometry import active_subspace, build_simplex_etf, orthogonal_complement


def setup(K=4, d=8, lam=0.01, eta=0.1, beta=Schedule("constant", 1.0), sigma_b=None, v_perp=1.0, pi=0.0):
    etf = build_simplex_etf(K, d, 1.0, rotation_seed=3)
    perp = orthogonal_complement(active_subspace(etf.means))
    mu_perp = 2.0 * perp.basis[0]
    tpt = TPTParams(eta, lam, 0, beta, Schedule("geometric", 1.0, 0.99))
    sb = 0.1 * np.eye(K) if sigma_b is None else sigma_b
    return etf, perp, MixtureParams(pi, etf.means[:, 0], mu_perp, tpt, sb, v_perp)


def test_decay_factor_examples():
    assert decay_factor(TPTParams(0.1, 1e-4)) == pytest.approx(0.99999)
    assert decay_factor(TPTParams(0.1, 0.0)) == 1.0
    tpt = TPTParams(0.1, 0.01)
    assert np.linalg.norm(ood_mean_at(1000, [1.0, 0.0], tpt)) == pytest.approx(0.999**1000)
    assert 0.999**1000 == pytest.approx(0.36770, abs=1e-5)
    with pytest.raises(ValueError):
        TPTParams(0.1, 10.0)


def test_ood_mean_at_examples():
    tpt = TPTParams(0.1, 0.01, t0=5)
    v = np.array([1.0, -2.0])
    np.testing.assert_array_equal(ood_mean_at(5, v, tpt), v)
    assert np.linalg.norm(ood_mean_at(10**6, v, tpt)) < 1e-12
    assert np.linalg.norm(ood_mean_at(5 + 693, v, tpt)) / np.linalg.norm(v) == pytest.approx(0.5, abs=1e-3)
    with pytest.raises(ValueError):
        ood_mean_at(4, v, tpt)


def test_variance_bounds_examples():
    tpt = TPTParams(0.1, 0.01)
    low, high = ood_variance_bounds(np.zeros((4, 4)), tpt, 100, v_perp=2.0)
    assert low == high == pytest.approx(0.999**200 * 2.0)
    low, high = ood_variance_bounds(np.eye(5), tpt, 0)
    assert high / low == pytest.approx(5 / 4)
    with pytest.raises(ValueError):
        ood_variance_bounds(-np.eye(3), tpt, 0)


@pytest.mark.parametrize("seed", range(20))
def test_sampled_ood_variance_within_bounds(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    sigma_b = A @ A.T / 4
    etf, _, mix = setup(sigma_b=sigma_b, beta=Schedule("linear", 1.0, 1e-3), v_perp=0.5)
    t = int(rng.integers(0, 500))
    x = sample_ood(20_000, etf, mix, t, seed=seed).features
    total = float(np.trace(np.cov(x.T)))
    low, high = ood_variance_bounds(sigma_b, mix.tpt, t, v_perp=0.5)
    assert low * 0.95 <= total <= high * 1.05


def test_sample_ood_examples():
    etf, perp, mix = setup()
    sub = active_subspace(etf.means)
    x = sample_ood(100_000, etf, mix, 0, seed=1).features
    sigma = math.sqrt(0.1 * np.trace(etf.means.T @ etf.means) / sub.rank)
    assert np.linalg.norm(sub.basis @ x.mean(0)) < 3 * sigma / math.sqrt(100_000) * math.sqrt(sub.rank)
    assert np.linalg.norm(perp.basis @ sample_ood(1000, etf, mix, 20_000, seed=1).features.mean(0)) < 1e-3
    etf, _, quiet = setup(sigma_b=np.zeros((4, 4)))
    assert np.linalg.norm(sample_ood(1000, etf, quiet, 20_000, seed=1).features.mean(0)) < 1e-3
    etf, _, still = setup(sigma_b=np.zeros((4, 4)), v_perp=0.0)
    y = sample_ood(50, etf, still, 30, seed=2).features
    assert np.ptp(y, axis=0).max() == 0


def test_sample_ood_is_deterministic():
    etf, _, mix = setup()
    a = sample_ood(100, etf, mix, 10, seed=5).features
    np.testing.assert_array_equal(a, sample_ood(100, etf, mix, 10, seed=5).features)


def test_sample_ood_rejects_in_span_perp():
    etf, _, mix = setup()
    bad = MixtureParams(0.0, etf.means[:, 0], etf.means[:, 1], mix.tpt)
    with pytest.raises(ValueError):
        sample_ood(10, etf, bad, 0, seed=0)


def test_mixture_degenerate_cases():
    etf, _, mix = setup(pi=1.0)
    t = 50
    x = sample_mixture(50_000, etf, mix, t, seed=3).features
    assert np.trace(np.cov(x.T)) == pytest.approx(mix.tpt.delta(t), rel=0.03)
    etf, _, mix0 = setup(pi=0.0)
    a = sample_mixture(50_000, etf, mix0, t, seed=3).features
    b = sample_ood(50_000, etf, mix0, t, seed=4).features
    np.testing.assert_allclose(a.mean(0), b.mean(0), atol=0.03)
    assert np.trace(np.cov(a.T)) == pytest.approx(np.trace(np.cov(b.T)), rel=0.03)


def test_mixture_mean():
    etf, _, mix = setup(pi=0.5)
    n, t = 100_000, 100
    x = sample_mixture(n, etf, mix, t, seed=9).features
    expected = 0.5 * etf.means[:, 0] + 0.5 * ood_mean_at(t, mix.ood_mean_perp, mix.tpt)
    se = np.sqrt(np.var(x, axis=0) / n)
    assert np.all(np.abs(x.mean(0) - expected) < 4 * se + 1e-12)


def test_predicted_snr_ood_examples():
    assert predicted_snr_ood(TPTParams(0.1, 0.01, 0, Schedule("constant", 0.0)), 100) == 1.0
    flat = TPTParams(0.1, 0.0, 0, Schedule("constant", 1.0))
    assert all(predicted_snr_ood(flat, t) == 0.5 for t in range(0, 1000, 100))
    grow = TPTParams(0.1, 0.01, 0, Schedule("linear", 1.0, 1e-3))
    vals = [predicted_snr_ood(grow, t) for t in range(0, 3000, 50)]
    assert np.all(np.diff(vals) < 0)


def test_predicted_snr_replay_examples():
    tpt = TPTParams(0.1, 0.01, 0, Schedule("linear", 1.0, 1e-3), Schedule("geometric", 1.0, 0.99))
    for t in (0, 100, 1000):
        assert predicted_snr_replay(0, 0, tpt=tpt, t=t) == pytest.approx(predicted_snr_ood(tpt, t))
    r2 = replay_ratio_sq(0.1, 0.1)
    assert predicted_snr_replay(0.1, 0.1, tpt=tpt, t=20_000) == pytest.approx(r2, rel=1e-3)
    a = predicted_snr_replay(0.2, 0.1, beta=1.0, delta=0.0, tpt=TPTParams(0.1, 1.0), t=10**6)
    b = predicted_snr_replay(0.2, 0.1, beta=2.0, delta=0.0, tpt=TPTParams(0.1, 1.0), t=10**6)
    assert a == pytest.approx(b) == pytest.approx(replay_ratio_sq(0.3))
    assert predicted_snr_replay(0.6, 0.4, beta=2.0, delta=0.5, tpt=tpt) == 4.0


@given(p=st.floats(0, 0.99), q=st.floats(0, 0.99), t=st.integers(0, 3000))
def test_predicted_snr_replay_monotone_in_pi(p, q, t):
    tpt = TPTParams(0.1, 0.01, 0, Schedule("linear", 1.0, 1e-3), Schedule("geometric", 1.0, 0.999))
    lo, hi = sorted((p, q))
    assert predicted_snr_replay(lo, None, tpt=tpt, t=t) <= predicted_snr_replay(hi, None, tpt=tpt, t=t) * (1 + 1e-12)


def test_buffer_bound_examples():
    assert buffer_mean_error_bound(4, 4) == 1.0
    assert buffer_mean_error_bound(3, 64) == pytest.approx(buffer_mean_error_bound(3, 16) / 2)
    with pytest.raises(ValueError):
        buffer_mean_error_bound(1, 0)


def test_buffer_bound_monte_carlo():
    rng = np.random.default_rng(0)
    d = 6
    for b in (4, 16, 64, 256):
        errs = [np.linalg.norm(rng.normal(size=(b, d)).mean(0)) for _ in range(200)]
        rmse = math.sqrt(np.mean(np.square(errs)))
        bound = buffer_mean_error_bound(d, b)
        assert bound / 1.5 <= rmse <= bound * 1.5


def test_schedule_and_helpers():
    assert Schedule("table", table=((0, 1.0), (10, 2.0)))(15) == 2.0
    with pytest.raises(ValueError):
        Schedule("cubic")
    with pytest.raises(ValueError):
        Schedule("linear", 1.0, -1.0)(10)
    assert aggregate_beta([1, 2, 3]) == 6 and aggregate_beta([1, 2, 3], "mean") == 2
    assert pi_from_buffer(0.05) == 0.05
    assert pi_from_buffer(0.5, {0.0: 0.0, 1.0: 0.8}) == pytest.approx(0.4)
