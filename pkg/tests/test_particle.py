import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbssm.core import GaussianBelief
from rbssm.kalman import kf_filter, ks_smooth
from rbssm.models import ModelFamily, PointMass, augment, simulate, trend_model
from rbssm.particle import (AncestryStore, LinearPF, ParticleCloud, ResamplePolicy, pf_filter,
                            pf_fixed_lag_smooth, pf_init, pf_step, resample_stratified, resample_systematic,
                            sof_pf_run, step_rng)


def counts(idx, m):
    return np.bincount(idx, minlength=m)


def test_stratified_examples():
    rng = np.random.default_rng(0)
    lw = np.log(np.array([1.0, 0.0, 0.0, 0.0]) + 1e-300)
    lw[1:] = -np.inf
    assert np.all(resample_stratified(lw, 10, rng) == 0)
    idx = resample_stratified(np.zeros(7), 7, rng)
    np.testing.assert_array_equal(idx, np.arange(7))
    for seed in range(50):
        c = counts(resample_stratified(np.log([0.75, 0.25]), 10_000, np.random.default_rng(seed)), 2)
        assert abs(c[0] - 7500) <= 2 and abs(c[1] - 2500) <= 2


def test_stratified_rejects_bad_weights():
    with pytest.raises(FloatingPointError):
        resample_stratified(np.array([0.0, np.nan]), 3, np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        resample_stratified(np.array([-np.inf, -np.inf]), 3, np.random.default_rng(0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40).filter(lambda w: sum(w) > 1e-6),
       st.integers(1, 500), st.integers(0, 2**31 - 1))
def test_property_stratified_bound(w, m, seed):
    w = np.array(w) / np.sum(w)
    with np.errstate(divide="ignore"):
        idx = resample_stratified(np.log(w), m, np.random.default_rng(seed))
    c = counts(idx, w.size)
    assert idx.size == m and np.all(np.diff(idx) >= 0)
    assert np.all(c >= np.floor(m * w) - 1e-9) and np.all(c <= np.ceil(m * w) + 1)


def test_stratified_is_unbiased():
    w = np.array([0.1, 0.37, 0.03, 0.5])
    tot = np.zeros(4)
    for s in range(4000):
        tot += counts(resample_stratified(np.log(w), 7, np.random.default_rng(s)), 4)
    np.testing.assert_allclose(tot / 4000 / 7, w, atol=0.01)


def test_systematic_counts():
    w = np.array([0.2, 0.3, 0.5])
    c = counts(resample_systematic(np.log(w), 1000, np.random.default_rng(1)), 3)
    assert np.all(np.abs(c - 1000 * w) <= 1)


def test_pf_init_examples():
    one = pf_init(lambda rng, m: np.full((m, 1), 2.5), 1, seed=0)
    assert one.m == 1 and one.particles[0, 0] == 2.5
    big = pf_init(lambda rng, m: rng.standard_normal((m, 1)), 100_000, seed=3)
    assert abs(big.particles.mean()) < 4 / math.sqrt(100_000)
    again = pf_init(lambda rng, m: rng.standard_normal((m, 1)), 100_000, seed=3)
    np.testing.assert_array_equal(big.particles, again.particles)
    with pytest.raises(ValueError):
        pf_init(lambda rng, m: np.zeros((m, 1)), 0, seed=0)


class _Static:
    def __init__(self, density):
        self.density = density

    def transition(self, x, n, rng):
        return x

    def loglik(self, x, y, n):
        return np.full(x.shape[0], math.log(self.density))


def test_step_zero_noise_flat_likelihood():
    cloud = ParticleCloud(np.array([[0.0], [1.0], [2.0]]), np.zeros(3), seed=0)
    st_ = pf_step(cloud, _Static(0.2), 1.0)
    assert st_.increment == pytest.approx(math.log(0.2), abs=1e-15)
    np.testing.assert_array_equal(np.sort(st_.cloud.particles[:, 0]), [0.0, 1.0, 2.0])


def test_step_single_particle_increment():
    m = trend_model(1, 0.0, 2.0, GaussianBelief([0.0], [[0.0]]))
    cloud = ParticleCloud(np.array([[0.5]]), np.zeros(1), seed=0)
    st_ = pf_step(cloud, LinearPF(m), 1.7)
    res = 1.7 - 0.5
    assert st_.increment == pytest.approx(-0.5 * math.log(2 * math.pi * 2.0) - res**2 / 4.0, abs=1e-14)


def test_step_missing_skips_weighting():
    cloud = ParticleCloud(np.array([[0.0], [1.0]]), np.log([0.25, 0.75]), seed=0)
    st_ = pf_step(cloud, _Static(1.0), math.nan)
    assert st_.increment == 0.0 and not st_.resampled
    np.testing.assert_allclose(st_.cloud.weights, [0.25, 0.75])


def test_step_all_zero_weights_reports_time():
    class Dead(_Static):
        def loglik(self, x, y, n):
            return np.full(x.shape[0], -np.inf)
    cloud = ParticleCloud(np.zeros((3, 1)), np.zeros(3), seed=0, n=4)
    with pytest.raises(FloatingPointError, match="n=5"):
        pf_step(cloud, Dead(1.0), 0.0)


def test_ess_policy_skips_resampling():
    cloud = ParticleCloud(np.arange(4.0)[:, None], np.zeros(4), seed=0)
    st_ = pf_step(cloud, _Static(1.0), 0.0, ResamplePolicy("ess", threshold=0.5))
    assert not st_.resampled and st_.ess == pytest.approx(4.0)
    with pytest.raises(ValueError):
        ResamplePolicy("sometimes")


def _brute_force_fixed_lag(values, weights, ancestors, lag):
    """Carry explicit per-particle histories, rewriting them at every resample."""
    N, m, c = values.shape
    hist = [[] for _ in range(m)]
    snaps = []
    for i in range(N):
        for j in range(m):
            hist[j].append(values[i, j])
        snaps.append([list(h) for h in hist])  # histories before resampling at time i
        hist = [list(hist[a]) for a in ancestors[i]]
    out = []
    for i in range(N):
        j = min(i + lag, N - 1)
        vals = np.array([snaps[j][p][i] for p in range(m)])
        out.append((vals, weights[j]))
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 6), st.integers(0, 8), st.integers(0, 2**31 - 1))
def test_property_ancestry_matches_history_copying(N, m, lag, seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(N, m, 2))
    weights = rng.dirichlet(np.ones(m), size=N)
    ancestors = np.sort(rng.integers(0, m, size=(N, m)), axis=1)
    store = AncestryStore(N, m, 2)
    for i in range(N):
        store.record(i, values[i], weights[i], ancestors[i])
    ref = _brute_force_fixed_lag(values, weights, ancestors, lag)
    got = {i: (v, w) for i, v, w in store.fixed_lag_marginals(lag)}
    assert sorted(got) == list(range(N))
    for i in range(N):
        np.testing.assert_array_equal(got[i][0], ref[i][0])
        np.testing.assert_array_equal(got[i][1], ref[i][1])
    paths, wN = store.trajectories()
    full = _brute_force_fixed_lag(values, weights, ancestors, N)
    for i in range(N):
        np.testing.assert_array_equal(paths[:, i], full[i][0])


def test_lag_zero_equals_filter():
    m = trend_model(1, 0.1, 1.0, GaussianBelief([0.0], [[1.0]]))
    ys, _ = simulate(m, 15, seed=1)
    run = pf_filter(LinearPF(m), ys, 200, seed=4)
    fm, fs = run.filter_summary()
    sm, ss = pf_fixed_lag_smooth(run, 0)
    np.testing.assert_array_equal(fm, sm)
    np.testing.assert_array_equal(fs, ss)
    with pytest.raises(ValueError):
        pf_fixed_lag_smooth(run, -1)


def test_seed_determinism():
    m = trend_model(2, 0.1, 1.0)
    ys, _ = simulate(m, 20, seed=1)
    a = pf_filter(LinearPF(m), ys, 300, seed=9)
    b = pf_filter(LinearPF(m), ys, 300, seed=9)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.store.values, b.store.values)


def test_step_rng_streams_differ():
    assert step_rng(1, 2).random() != step_rng(1, 3).random()
    assert step_rng(1, 2).random() == step_rng(1, 2).random()


@pytest.mark.slow
def test_filter_and_smoother_within_mc_band_of_kalman():
    m = trend_model(1, 0.2, 1.0, GaussianBelief([0.0], [[2.0]]))
    ys, _ = simulate(m, 20, seed=5)
    kf = kf_filter(m, ys)
    ks = ks_smooth(kf)
    fms, sms = [], []
    for seed in range(25):
        run = pf_filter(LinearPF(m), ys, 100_000, seed=seed)
        fms.append(run.filter_summary()[0][:, 0])
        sms.append(pf_fixed_lag_smooth(run, ys.n)[0][:, 0])
    fms, sms = np.array(fms), np.array(sms)
    # per-run deviation vs the seed-to-seed spread
    f_sd = fms.std(axis=0, ddof=1)
    s_sd = sms.std(axis=0, ddof=1)
    assert np.all(np.abs(fms[0] - kf.filt_mean[:, 0]) <= 5 * f_sd)
    assert np.all(np.abs(sms[0] - ks.mean[:, 0]) <= 5 * s_sd)
    # the seed average is unbiased
    assert np.all(np.abs(fms.mean(0) - kf.filt_mean[:, 0]) <= 5 * f_sd / 5)


def _static_sof(theta):
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0}, x0=GaussianBelief([0.0], [[2.0]]))
    return augment(fam, ["tau2"], walk_sd=0.0, prior=PointMass([theta]))


@pytest.mark.slow
def test_sof_pf_point_prior_loglik_matches_kalman():
    aug = _static_sof(-0.7)
    ys, _ = simulate(aug.base(np.array([-0.7])), 30, seed=2)
    ref = kf_filter(aug.base(np.array([-0.7])), ys).loglik
    lls = np.array([sof_pf_run(aug, ys, 10_000, 30, seed=s, smooth=False).loglik for s in range(25)])
    assert abs(lls[0] - ref) <= 5 * lls.std(ddof=1)
    assert abs(lls.mean() - ref) <= 5 * lls.std(ddof=1) / 5


@pytest.mark.slow
def test_doubling_particles_does_not_worsen_median_error():
    aug = _static_sof(-1.0)
    model = aug.base(np.array([-1.0]))
    ys, _ = simulate(model, 50, seed=3)
    truth = ks_smooth(kf_filter(model, ys)).mean[:, 0]
    med = []
    for m in (500, 1000):
        e = [np.sum((sof_pf_run(aug, ys, m, 50, seed=s).smoother["trend"].mean - truth) ** 2) for s in range(11)]
        med.append(np.median(e))
    assert med[1] <= med[0]


def test_sof_pf_outputs():
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0}, x0=GaussianBelief([0.0], [[2.0]]))
    aug = augment(fam, ["tau2", "sigma2"])
    ys, _ = simulate(fam.model(), 25, seed=1)
    out = sof_pf_run(aug, ys, 500, 10, seed=1)
    assert set(out.filter) == {"trend", "log10_tau2", "log10_sigma2"}
    assert out.timings["filter"] > 0 and out.timings["smoother"] >= 0
    assert 1 <= out.info["min_ess"] <= 500
