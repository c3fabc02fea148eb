"""Self-organizing trend estimation on a simulated series.

Simulates a random-walk trend, fits the variances by maximum likelihood,
then lets the system-noise variance drift as part of the state and compares
three ways of tracking it: a plain particle filter over (trend, theta), the
Rao-Blackwellized particle filter, and the Rao-Blackwellized grid filter.

    python demos/trend_selforg.py
"""

import time

import numpy as np

from rbssm import (ModelFamily, ParamVector, augment, data_prior, kf_filter, ks_smooth, mle_fit, rbngf_run,
                   rbpf_smooth, simulate, sof_pf_run, split_partial_linear)
from rbssm.evaluation import metric_e1

N = 200
true = {"tau2": 0.1582, "sigma2": 4.2624}
ys, states = simulate(ModelFamily("trend1", true).model(), N, seed=4)
x0 = data_prior("trend1", ys)
print(f"simulated {N} points from a random-walk trend (tau2={true['tau2']}, sigma2={true['sigma2']})")

# maximum likelihood over log10 variances
fam = ModelFamily("trend1", {"tau2": 1.0, "sigma2": 1.0}, x0=x0)
init = ParamVector([0.0, 0.0], ("tau2", "sigma2"), [(-8, 8), (-8, 8)])
fit = mle_fit(lambda th: fam.model(tau2=10 ** th[0], sigma2=10 ** th[1]), ys, init)
est = dict(zip(("tau2", "sigma2"), fit.params.variances))
print(f"ML fit: tau2={est['tau2']:.4f} sigma2={est['sigma2']:.4f} loglik={fit.loglik:.3f}")

fitted = ModelFamily("trend1", est, x0=x0)
kalman = ks_smooth(kf_filter(fitted.model(), ys)).mean[:, 0]
print(f"Kalman smoother at the fit: E1 against the latent trend = {metric_e1(kalman, states[:, 0]):.2f}")

# tau2 becomes a slowly drifting state; sigma2 stays at its fitted value
aug = augment(fitted, ["tau2"])
split = split_partial_linear(aug)
reference = np.mean([rbpf_smooth(split, ys, 50_000, N, seed=100 + s).smoother["trend"].mean for s in range(2)],
                    axis=0)

print("\nsmoothed trend against a 2 x 50,000-particle RB-PF reference")
print(f"{'method':<22}{'E1':>10}{'loglik':>12}{'seconds':>10}")
for label, run in (
        ("PF, m=10,000", lambda: sof_pf_run(aug, ys, 10_000, N, seed=1)),
        ("RB-PF, m=1,000", lambda: rbpf_smooth(split, ys, 1000, N, seed=1)),
        ("RB-NGF, 101 nodes", lambda: rbngf_run(split, 101, ys))):
    t0 = time.perf_counter()
    out = run()
    dt = time.perf_counter() - t0
    print(f"{label:<22}{metric_e1(out.smoother['trend'].mean, reference):>10.4f}{out.loglik:>12.3f}{dt:>10.2f}")

out = rbpf_smooth(split, ys, 1000, N, seed=1)
th = out.smoother["log10_tau2"]
print(f"\nsmoothed log10 tau2 ranges over [{th.mean.min():.2f}, {th.mean.max():.2f}] "
      f"(true value {np.log10(true['tau2']):.2f})")
