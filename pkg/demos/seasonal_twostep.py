"""Seasonal adjustment with drifting variances: RB-PF against the two-step smoother.

Each RB-PF particle carries a 13-dimensional Kalman filter, so smoothing the
state along every particle's parameter path is expensive.  The two-step
method keeps only the parameter ancestry, reads a handful of quantile paths
off it and runs one Kalman smoother per path.  This script prints error and
cost for both as the number of paths grows.

    python demos/seasonal_twostep.py        (about two minutes)
"""

import time

from rbssm import (VARIANCE_NAMES, ModelFamily, augment, data_prior, rbpf_filter, rbpf_smooth, seasonal_model,
                   seasonal_start, simulate, split_partial_linear, twostep_from_run)
from rbssm.evaluation import metric_e2

params = {"tau1_2": 0.005, "tau2_2": 0.8, "sigma2": 30.0}
ys, _ = simulate(seasonal_model(12, **params), 156, 11, x_init=seasonal_start(12, 300, 0.5, 10, 1))
fam = ModelFamily("seasonal", params, 12, x0=data_prior("seasonal", ys))
split = split_partial_linear(augment(fam, VARIANCE_NAMES["seasonal"]))
N = ys.n

print("building a 20,000-particle RB-PF reference ...")
ref = rbpf_smooth(split, ys, 20_000, N, seed=100).smoother
truth = (ref["trend"].mean, ref["seasonal"].mean)

run = rbpf_filter(split, ys, 3000, seed=1)
t0 = time.perf_counter()
rb = rbpf_smooth(split, ys, 3000, N, seed=1, run=run)
t_rb = time.perf_counter() - t0
e_rb = metric_e2(rb.smoother["trend"].mean, rb.smoother["seasonal"].mean, *truth)
print(f"\nforward RB-PF pass (m=3000): {run.timings['filter']:.2f} s")
print(f"RB-PF smoother over all particle paths: E2 {e_rb:.2e}, {t_rb:.2f} s")

print(f"\n{'np':>4}{'E2':>12}{'smoother s':>12}")
for np_ in (1, 3, 5, 11, 21):
    res = twostep_from_run(run, np_, N, repeats=3)
    print(f"{np_:>4}{metric_e2(res.trend, res.seasonal, *truth):>12.2e}{res.timings['smoother']:>12.3f}")
