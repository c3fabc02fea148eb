import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbssm.core import GaussianBelief
from rbssm.kalman import batch_predict, kf_filter, ks_smooth
from rbssm.models import (DEFAULT_BOUNDS, VARIANCE_NAMES, FixedSplit, GaussianPrior, ModelFamily, PointMass,
                          UniformBox, augment, data_prior, from_config, seasonal_model, seasonal_start, simulate,
                          split_partial_linear, state_dim, trend_model)


def test_trend_structure():
    m1 = trend_model(1, 0.1, 1.0)
    assert m1.dim_x == 1
    m2 = trend_model(2, 0.1, 1.0)
    F, G, H, Q, R = m2.matrices(1)
    np.testing.assert_array_equal(F, [[2, -1], [1, 0]])
    np.testing.assert_array_equal(G, [[1], [0]])
    np.testing.assert_array_equal(H, [1, 0])
    with pytest.raises(ValueError):
        trend_model(3, 0.1, 1.0)


def test_exact_observation_filter_equals_data():
    m = trend_model(1, 0.5, 0.0)
    ys, _ = simulate(trend_model(1, 0.5, 1.0), 30, seed=1)
    run = kf_filter(m, ys)
    np.testing.assert_allclose(run.filt_mean[:, 0], ys.values, rtol=0, atol=1e-9)


def test_straight_line_trend_is_least_squares():
    """tau2 = 0: the smoothed trend is the regression line on (T_0, T_-1) with the prior as a ridge."""
    N, s2, P0 = 40, 1.5, 1e6
    x0 = GaussianBelief([0.0, 0.0], np.eye(2) * P0)
    m = trend_model(2, 0.0, s2, x0)
    rng = np.random.default_rng(3)
    n = np.arange(1, N + 1)
    ys = 2.0 + 0.3 * n + rng.normal(0, np.sqrt(s2), N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sm = ks_smooth(kf_filter(m, ys))
    Z = np.column_stack([n + 1, -n]).astype(float)  # T_n = (n+1) T_0 - n T_-1
    A = Z.T @ Z / s2 + np.eye(2) / P0
    x0_post = np.linalg.solve(A, Z.T @ ys / s2)
    np.testing.assert_allclose(sm.mean[:, 0], Z @ x0_post, rtol=0, atol=1e-6)
    # and with a diffuse prior that is the ordinary least-squares line
    X = np.column_stack([np.ones(N), n])
    ols = X @ np.linalg.lstsq(X, ys, rcond=None)[0]
    np.testing.assert_allclose(sm.mean[:, 0], ols, atol=1e-3)


def test_seasonal_structure():
    m = seasonal_model(12, 0.01, 0.1, 1.0)
    assert m.dim_x == 13 and m.dim_v == 2
    F, G, H, Q, R = m.matrices(1)
    np.testing.assert_array_equal(F[2, 2:], -np.ones(11))
    np.testing.assert_array_equal(np.diag(Q), [0.01, 0.1])
    with pytest.raises(ValueError):
        seasonal_model(1)


def test_seasonal_repeats_without_noise():
    x = seasonal_start(12, 10.0, 0.0, 3.0, seed=1)
    m = seasonal_model(12, 0.0, 0.0, 1.0)
    F = m.matrices(1)[0]
    seas = []
    for _ in range(36):
        x = F @ x
        seas.append(x[2])
    seas = np.array(seas)
    np.testing.assert_allclose(seas[12:], seas[:-12], atol=1e-12)


def test_seasonal_constant_series():
    """Constant input, no system noise: the seasonal is zero and the trend is the level."""
    c = 7.0
    x0 = GaussianBelief(np.r_[c, c, np.zeros(3)], np.eye(5) * 1e-10)
    m = seasonal_model(4, 0.0, 0.0, 1.0, x0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sm = ks_smooth(kf_filter(m, np.full(24, c)))
    np.testing.assert_allclose(sm.mean[:, 2], 0.0, atol=1e-8)
    np.testing.assert_allclose(sm.mean[:, 0], c, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 13), st.integers(0, 2**31 - 1))
def test_seasonal_observation_is_additive(period, seed):
    rng = np.random.default_rng(seed)
    m = seasonal_model(period, 0.1, 0.1, 1.0)
    x = rng.normal(size=period + 1)
    comps = m.components
    assert m.matrices(1)[2] @ x == pytest.approx(comps["trend"] @ x + comps["seasonal"] @ x, abs=1e-12)


def test_augment_dimensions():
    fam1 = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0})
    assert augment(fam1, ["tau2"]).dim_z == 2
    assert augment(fam1, ["tau2", "sigma2"]).dim_z == 3
    fams = ModelFamily("seasonal", {"tau1_2": 0.01, "tau2_2": 0.1, "sigma2": 1.0})
    aug = augment(fams, VARIANCE_NAMES["seasonal"])
    assert aug.dim_z == 16
    sp = split_partial_linear(aug)
    assert (sp.param_dim, sp.dim_x) == (3, 13)
    with pytest.raises(ValueError):
        augment(fam1, [])
    with pytest.raises(ValueError):
        augment(fam1, ["tau1_2"])


@pytest.mark.parametrize("kind", ["trend1", "trend2", "seasonal"])
def test_probe_grid_builds_valid_models(kind):
    params = {nm: 1.0 for nm in VARIANCE_NAMES[kind]}
    fam = ModelFamily(kind, params, period=4)
    names = VARIANCE_NAMES[kind][:2]
    aug = augment(fam, names)
    b = aug.bounds
    for a in np.linspace(*b[0], 5):
        for c in np.linspace(*b[1], 5):
            aug.base(np.array([a, c])).validate(1)


def test_split_round_trip(rng):
    fam = ModelFamily("seasonal", {"tau1_2": 0.01, "tau2_2": 0.1, "sigma2": 1.0}, period=6)
    aug = augment(fam, VARIANCE_NAMES["seasonal"])
    sp = split_partial_linear(aug)
    thetas = aug.prior.sample(rng, 100)
    F, G, H, Q, R = sp.conditional(thetas)
    for j in range(100):
        Fb, Gb, Hb, Qb, Rb = aug.base(thetas[j]).matrices(1)
        np.testing.assert_array_equal(F, Fb)
        np.testing.assert_array_equal(Q[j], Qb)
        assert R[j] == Rb
    th = thetas[:1]
    ys, _ = simulate(aug.base(th[0]), 20, seed=2)
    run_split = kf_filter(sp.model_at(th[0]), ys)
    run_base = kf_filter(aug.base(th[0]), ys)
    assert run_split.loglik == run_base.loglik


def test_zero_walk_keeps_theta(rng):
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0})
    sp = split_partial_linear(augment(fam, ["tau2"], walk_sd=0.0))
    th = np.array([[0.3], [-1.0]])
    assert sp.theta_step(th, rng) is th
    moving = split_partial_linear(augment(fam, ["tau2"], walk_sd=0.5))
    assert not np.array_equal(moving.theta_step(th, rng), th)


def test_priors(rng):
    box = UniformBox([[-1, 1], [0, 2]])
    s = box.sample(rng, 1000)
    assert s.shape == (1000, 2) and s.min() >= -1 and s[:, 1].max() <= 2
    assert np.isneginf(box.logpdf(np.array([[5.0, 1.0]]))[0])
    pm = PointMass([0.5])
    np.testing.assert_array_equal(pm.sample(rng, 3), [[0.5]] * 3)
    gp = GaussianPrior([0.0], [2.0])
    assert abs(gp.sample(rng, 20000).std() - 2.0) < 0.1


def test_fixed_split_reduces_to_model():
    m = trend_model(2, 0.1, 1.0)
    fs = FixedSplit(m)
    F, G, H, Q, R = fs.conditional(np.zeros((4, 1)))
    assert Q.shape == (4, 1, 1) and R.shape == (4,)
    assert fs.components == {"trend": m.components["trend"]}


def test_data_prior_and_config():
    ys = np.arange(30, dtype=float)
    b = data_prior("seasonal", ys, 12)
    assert b.mean[0] == b.mean[1] == 5.5 and b.mean[2] == 0.0
    cfg = {"model": "seasonal", "period": 4, "params": {"sigma2": 2.0}, "x0": "data",
           "selforg": {"names": ["sigma2"], "walk_sd": 0.01}}
    mc = from_config(cfg, ys)
    assert mc.family.params == {"tau1_2": 1.0, "tau2_2": 1.0, "sigma2": 2.0}
    assert mc.aug.names == ("sigma2",) and mc.aug.walk_sd[0] == 0.01
    np.testing.assert_array_equal(mc.aug.bounds, [DEFAULT_BOUNDS["seasonal"]["sigma2"]])
    with pytest.raises(KeyError, match="bogus"):
        from_config({"bogus": 1})
    with pytest.raises(KeyError, match="tau9"):
        from_config({"params": {"tau9": 1}})
    assert from_config({"selforg": {}}).aug is not None


def test_state_dim():
    assert [state_dim(k, 12) for k in ("trend1", "trend2", "seasonal")] == [1, 2, 13]


def test_simulate_seed_determinism():
    m = seasonal_model(4, 0.1, 0.1, 1.0)
    a, sa = simulate(m, 10, seed=5)
    b, sb = simulate(m, 10, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(sa, sb)


def test_predict_symmetry_exact(rng):
    A = rng.normal(size=(50, 5, 5))
    cov = A @ A.transpose(0, 2, 1)
    F = rng.normal(size=(5, 5))
    G = rng.normal(size=(5, 2))
    Q = np.repeat(np.eye(2)[None], 50, 0)
    _, cp = batch_predict(rng.normal(size=(50, 5)), cov, F, G, Q)
    np.testing.assert_array_equal(cp, cp.transpose(0, 2, 1))
    direct = F @ cov @ F.T + G @ Q @ G.T
    np.testing.assert_allclose(cp, direct, rtol=1e-12, atol=1e-12)
