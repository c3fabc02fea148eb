
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbssm.kalman import kf_filter, ks_smooth
from rbssm.models import ModelFamily, PointMass, augment, data_prior, simulate, split_partial_linear
from rbssm.rao_blackwell import rbpf_filter
from rbssm.twostep import PercentileSchedule, percentile_paths, twostep_from_run, twostep_run, twostep_smooth, \
    weighted_quantile


def test_schedule_probs():
    np.testing.assert_allclose(PercentileSchedule(5).probs, [0.1, 0.3, 0.5, 0.7, 0.9])
    assert PercentileSchedule(1).probs[0] == 0.5
    with pytest.raises(ValueError):
        PercentileSchedule(0)


@given(st.integers(1, 60))
def test_property_schedule_symmetric(n):
    p = PercentileSchedule(n).probs
    np.testing.assert_allclose(p + p[::-1], 1.0, atol=1e-15)
    assert np.all(np.diff(p) > 0) and p[0] > 0 and p[-1] < 1


def test_weighted_quantile_two_points():
    np.testing.assert_array_equal(weighted_quantile([0.0, 1.0], [0.5, 0.5], [0.25, 0.5, 0.75]), [0, 0, 1])


def _cdf_oracle(values, weights, p):
    """Scan every candidate value; return the smallest with CDF >= p."""
    w = np.asarray(weights) / np.sum(weights)
    for v in sorted(set(values)):
        if sum(wi for vi, wi in zip(values, w) if vi <= v) >= p - 1e-12:
            return v
    return max(values)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(1, 9)), min_size=1, max_size=12),
       st.floats(0.001, 0.999))
def test_property_weighted_quantile_matches_cdf_scan(pairs, p):
    vals = [float(v) for v, _ in pairs]
    w = [float(x) for _, x in pairs]
    assert weighted_quantile(vals, w, [p])[0] == _cdf_oracle(vals, w, p)


def test_weighted_quantile_rejects_empty():
    with pytest.raises(ValueError):
        weighted_quantile([], [], [0.5])
    with pytest.raises(ValueError):
        weighted_quantile([1.0], [0.0], [0.5])


def test_percentile_paths_rank_pairing():
    marg = [(i, np.array([[1.0, 10.0], [2.0, 30.0], [3.0, 20.0]]) + i, np.ones(3) / 3) for i in range(4)]
    paths = percentile_paths(marg, 4, 2, 3)
    np.testing.assert_array_equal(paths[:, 2, 0], [3.0, 4.0, 5.0])
    np.testing.assert_array_equal(paths[:, 0, 1], [10.0, 20.0, 30.0])
    with pytest.raises(ValueError, match="missing"):
        percentile_paths(marg[:3], 4, 2, 3)


def _trend(walk_sd=None, prior=None, n=40, seed=3):
    fam0 = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0})
    ys, _ = simulate(fam0.model(), n, seed)
    fam = ModelFamily("trend1", {"tau2": 0.1, "sigma2": 1.0}, x0=data_prior("trend1", ys))
    kw = {}
    if walk_sd is not None:
        kw["walk_sd"] = walk_sd
    if prior is not None:
        kw["prior"] = prior
    return augment(fam, ["tau2", "sigma2"], **kw), ys


def test_constant_path_matches_kalman_smoother():
    th = np.array([-1.0, 0.0])
    aug, ys = _trend(0.0, PointMass(th))
    paths = np.broadcast_to(th, (1, ys.n, 2))
    res = twostep_smooth(split_partial_linear(aug), paths, ys)
    ref = ks_smooth(kf_filter(aug.base(th), ys)).mean[:, 0]
    np.testing.assert_allclose(res.trend, ref, atol=1e-12)


def test_point_prior_gives_kalman_smoother():
    th = np.array([-1.0, 0.0])
    aug, ys = _trend(0.0, PointMass(th))
    res, out = twostep_run(split_partial_linear(aug), ys, 20, 3, ys.n, seed=1, repeats=1)
    ref = ks_smooth(kf_filter(aug.base(th), ys)).mean[:, 0]
    np.testing.assert_allclose(res.trend, ref, atol=1e-12)
    np.testing.assert_allclose(out.smoother["trend"].mean, ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.floats(-2, 1), st.floats(-1, 1))
def test_property_identical_paths_average_is_idempotent(k, a, b):
    aug, ys = _trend(n=15)
    sp = split_partial_linear(aug)
    one = np.broadcast_to([a, b], (1, 15, 2))
    many = np.broadcast_to([a, b], (k, 15, 2))
    np.testing.assert_allclose(twostep_smooth(sp, many, ys).trend, twostep_smooth(sp, one, ys).trend, atol=1e-12)
    w = twostep_smooth(sp, many, ys, weight_by_likelihood=True)
    np.testing.assert_allclose(w.trend, twostep_smooth(sp, one, ys).trend, atol=1e-12)


def test_failing_path_is_named():
    aug, ys = _trend(n=10)
    paths = np.zeros((3, 10, 2))
    paths[2, 5, 1] = np.nan
    with pytest.raises(FloatingPointError, match="path 2"):
        twostep_smooth(split_partial_linear(aug), paths, ys)


def test_shape_check():
    aug, ys = _trend(n=10)
    with pytest.raises(ValueError, match="theta paths"):
        twostep_smooth(split_partial_linear(aug), np.zeros((2, 9, 2)), ys)


def test_single_path_uses_the_median():
    aug, ys = _trend()
    run = rbpf_filter(split_partial_linear(aug), ys, 301, 2)
    res = twostep_from_run(run, 1, 10, repeats=1)
    for i, vals, w in run.store.fixed_lag_marginals(10):
        assert res.theta_paths[0, i, 0] == weighted_quantile(vals[:, 0], w, [0.5])[0]


def test_timing_accounting_and_lag_bounds():
    aug, ys = _trend()
    run = rbpf_filter(split_partial_linear(aug), ys, 200, 2)
    res = twostep_from_run(run, 3, 5, repeats=3)
    assert res.timings["filter"] == pytest.approx(run.timings["filter"] + res.timings["percentiles"])
    assert res.timings["smoother"] > 0
    with pytest.raises(ValueError):
        twostep_from_run(run, 3, ys.n + 1)
    with pytest.raises(ValueError):
        twostep_from_run(run, 3, -1)


def test_more_paths_spread_more():
    aug, ys = _trend()
    run = rbpf_filter(split_partial_linear(aug), ys, 500, 4)
    res = twostep_from_run(run, 5, 10, repeats=1)
    th = res.theta_paths[:, :, 0]
    assert np.all(np.diff(th, axis=0) >= 0)  # rank pairing keeps paths ordered
