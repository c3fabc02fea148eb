import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbssm.kalman import kf_filter, ks_smooth
from rbssm.models import (VARIANCE_NAMES, FixedSplit, ModelFamily, PointMass, augment, data_prior, simulate,
                          split_partial_linear, trend_model)
from rbssm.particle import sof_pf_run
from rbssm.rao_blackwell import (rb_mixture_moments, rbngf_filter, rbngf_run, rbngf_smooth, rbpf_filter,
                                 rbpf_smooth)


def test_mixture_examples():
    mean, sd = rb_mixture_moments([0.5, 0.5], [0.0, 2.0], [1.0, 1.0])
    assert mean == pytest.approx(1.0) and sd**2 == pytest.approx(2.0)
    mean, sd = rb_mixture_moments([1.0], [3.0], [4.0])
    assert mean == 3.0 and sd == 2.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_property_mixture_matches_sampling_free_formula(c, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(c))
    mu = rng.normal(size=c)
    var = rng.uniform(0.01, 2, size=c)
    mean, sd = rb_mixture_moments(w, mu, var)
    # E[X^2] - E[X]^2 computed directly
    second = np.sum(w * (var + mu**2))
    assert mean == pytest.approx(np.sum(w * mu), abs=1e-12)
    assert sd**2 == pytest.approx(second - mean**2, abs=1e-10)
    assert sd**2 >= np.min(var) * (1 - 1e-12)


def _degenerate(kind, rng):
    fam = ModelFamily(kind, {nm: 10 ** rng.uniform(-2, 0) for nm in VARIANCE_NAMES[kind]}, period=4)
    th = rng.uniform(-1, 0, len(VARIANCE_NAMES[kind]))
    aug = augment(fam, VARIANCE_NAMES[kind], walk_sd=0.0, prior=PointMass(th))
    return aug, th


@pytest.mark.parametrize("kind", ["trend1", "trend2", "seasonal"])
def test_single_particle_point_prior_is_kalman_bit_for_bit(kind):
    aug, th = _degenerate(kind, np.random.default_rng(5))
    sp = split_partial_linear(aug)
    model = aug.base(th)
    ys, _ = simulate(model, 30, 1)
    kr = kf_filter(model, ys)
    sr = ks_smooth(kr)
    run = rbpf_filter(sp, ys, 1, 0)
    out = rbpf_smooth(sp, ys, 1, 30, 0, run=run)
    assert run.loglik == kr.loglik
    for name, vec in aug.components.items():
        np.testing.assert_array_equal(out.filter[name].mean, kr.filt_mean @ vec)
        np.testing.assert_array_equal(out.smoother[name].mean, sr.mean @ vec)


def test_fixed_split_matches_kalman():
    model = trend_model(2, 0.05, 1.0)
    ys, _ = simulate(model, 25, 3)
    sp = FixedSplit(model)
    out = rbpf_smooth(sp, ys, 4, 25, 0)
    kr = kf_filter(model, ys)
    assert out.loglik == pytest.approx(kr.loglik, abs=1e-9)
    np.testing.assert_allclose(out.smoother["trend"].mean, ks_smooth(kr).mean[:, 0], atol=1e-10)


def test_single_node_grid_is_kalman():
    aug, th = _degenerate("trend2", np.random.default_rng(8))
    model = aug.base(th)
    ys, _ = simulate(model, 30, 2)
    kr = kf_filter(model, ys)
    out = rbngf_run(split_partial_linear(aug), tuple(np.array([t]) for t in th), ys)
    assert out.loglik == pytest.approx(kr.loglik, abs=1e-10)
    np.testing.assert_allclose(out.filter["trend"].mean, kr.filt_mean[:, 0], atol=1e-12)
    np.testing.assert_allclose(out.smoother["trend"].mean, ks_smooth(kr).mean[:, 0], atol=1e-12)


def test_static_theta_smoothed_weights_equal_final_filter_weights():
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0})
    ys, _ = simulate(fam.model(), 40, 4)
    aug = augment(fam, ["tau2"], walk_sd=0.0)
    out = rbngf_run(split_partial_linear(aug), 41, ys)
    sm = out.smoother["log10_tau2"].mean
    assert np.ptp(sm) == 0.0
    assert sm[0] == pytest.approx(out.filter["log10_tau2"].mean[-1], abs=1e-14)


def test_missing_observation_keeps_grid():
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0})
    ys, _ = simulate(fam.model(), 10, 4)
    vals = ys.values.copy()
    vals[4] = np.nan
    run = rbngf_filter(split_partial_linear(augment(fam, ["tau2"], walk_sd=0.0)), 21, vals)
    np.testing.assert_array_equal(run.filtered[4], run.filtered[3])
    assert run.increments[4] == 0.0


def _sof_trend(n=60):
    fam0 = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0})
    ys, _ = simulate(fam0.model(), n, 2)
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0}, x0=data_prior("trend1", ys))
    return augment(fam, ["tau2"]), ys


@pytest.mark.slow
def test_grid_and_particle_rao_blackwell_agree():
    aug, ys = _sof_trend()
    sp = split_partial_linear(aug)
    g = rbngf_run(sp, 201, ys)
    p = rbpf_smooth(sp, ys, 20_000, 60, 0)
    assert np.abs(g.filter["trend"].mean - p.filter["trend"].mean).max() < 0.03
    assert np.abs(g.smoother["trend"].mean - p.smoother["trend"].mean).max() < 0.03
    assert g.loglik == pytest.approx(p.loglik, abs=0.05)


@pytest.mark.slow
def test_rao_blackwell_reduces_variance():
    aug, ys = _sof_trend()
    sp = split_partial_linear(aug)
    rb = np.array([rbpf_smooth(sp, ys, 300, 60, s).filter["trend"].mean for s in range(15)])
    pf = np.array([sof_pf_run(aug, ys, 300, 60, seed=s).filter["trend"].mean for s in range(15)])
    assert rb.var(axis=0).mean() < pf.var(axis=0).mean()


def test_cloned_particles_do_not_alias():
    aug, ys = _sof_trend(20)
    run = rbpf_filter(split_partial_linear(aug), ys, 50, 1)
    p = run.particle(0)
    assert not np.shares_memory(p.belief.mean, run.final_mean)
    assert not np.shares_memory(p.belief.cov, run.final_cov)
    with pytest.raises(ValueError):
        p.belief.mean[:] += 100.0
    # resampled duplicates are independent rows
    assert not np.shares_memory(run.particle(1).belief.mean, p.belief.mean)
    assert run.final_mean.flags.writeable


def test_grid_cap_refuses():
    aug, ys = _sof_trend(10)
    with pytest.raises(MemoryError, match="cap"):
        rbngf_filter(split_partial_linear(aug), 101, ys, cap=50)


def test_unmerged_grid_runs():
    aug, ys = _sof_trend(30)
    sp = split_partial_linear(aug)
    a = rbngf_smooth(rbngf_filter(sp, 51, ys, merge=False))
    b = rbngf_smooth(rbngf_filter(sp, 51, ys, merge=True))
    assert not a.info["merged"] and b.info["merged"]
    assert np.all(np.isfinite(a.smoother["trend"].mean))
