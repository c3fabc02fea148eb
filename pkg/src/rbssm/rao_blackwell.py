"""Rao-Blackwellized filters and smoothers for partially linear models.

The parameter theta is carried by particles (RB-PF) or by grid nodes
(RB-NGF); the state x given a theta history is handled exactly by a Kalman
recursion attached to every particle or node.  All Kalman arithmetic runs
through the batched engine in :mod:`rbssm.kalman`, so a single particle
with a static parameter reproduces the plain Kalman filter bit for bit.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianBelief, RunSummary, as_series, normalize_logweights, summarize_bands
from .kalman import batch_filter, batch_predict, batch_update, gaussian_logpdf, rts_backward
from .ngf import DensityGrid, GaussianWalkKernel, NGFRun, ngf_smooth, ngf_update, trapezoid_weights
from .particle import AncestryStore, EssReport, ResamplePolicy, log_mean_weight, step_rng

DEFAULT_CHUNK_BYTES = 200e6


def rb_mixture_moments(weights, means, variances):
    """Mean and sd of a Gaussian mixture (law of total variance).

    ``means`` and ``variances`` have the components on axis 0; extra axes
    are independent coordinates.
    """
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    mean = np.tensordot(w, mu, axes=(0, 0))
    total = np.tensordot(w, var + (mu - mean) ** 2, axes=(0, 0))
    return mean, np.sqrt(np.maximum(total, 0.0))


def _projection(split):
    labels = list(split.components)
    return np.array([split.components[nm] for nm in labels], dtype=float), labels


def _project_moments(P, mean, cov):
    """Per-batch projected means and variances: (B, c) each."""
    B, k = mean.shape
    pm = mean @ P.T
    tmp = (cov.reshape(B * k, k) @ P.T).reshape(B, k, -1)
    pv = np.einsum("bkc,ck->bc", tmp, P)
    return pm, pv


@dataclass
class RBParticle:
    """One parameter sample with its conditional state belief."""

    theta: np.ndarray
    belief: GaussianBelief
    logweight: float
    theta_history: np.ndarray


@dataclass
class RBPFRun:
    split: object
    ys: np.ndarray
    m: int
    seed: int
    store: AncestryStore  # theta values before resampling, per time
    labels: list
    x_mean: np.ndarray  # (N, c) filtered mixture means of the components
    x_sd: np.ndarray
    increments: np.ndarray
    loglik: float
    ess: EssReport
    final_theta: np.ndarray
    final_mean: np.ndarray
    final_cov: np.ndarray
    final_weights: np.ndarray
    bad_variance: int = 0
    timings: dict = field(default_factory=dict)

    def particle(self, i: int) -> RBParticle:
        """Final-time particle ``i`` (before the last resampling)."""
        hist, _ = self.store.trajectories()
        return RBParticle(self.final_theta[i].copy(),
                          GaussianBelief(self.final_mean[i].copy(), self.final_cov[i].copy(), len(self.ys), "filtered"),
                          float(np.log(self.final_weights[i])), hist[i])

    def theta_summary(self, lag: int | None = None):
        """Filtered (lag None) or fixed-lag smoothed theta mean and sd, (N, d) each."""
        marg = self.store.filter_marginals() if lag is None else self.store.fixed_lag_marginals(lag)
        return self.store.summarize(marg)


def rbpf_filter(split, ys, m: int, seed: int, policy: ResamplePolicy = ResamplePolicy()) -> RBPFRun:
    """Particle filter over theta with one Kalman filter per particle.

    Each step moves theta by its random walk, predicts every particle's
    state under its new theta, weights by the Gaussian predictive density
    of y_n, updates, and resamples (cloning beliefs by value).
    """
    t0 = time.perf_counter()
    ys = as_series(ys).values
    N = ys.size
    if m < 1:
        raise ValueError("m must be at least 1")
    P, labels = _projection(split)
    d = split.param_dim
    theta = np.asarray(split.prior.sample(step_rng(seed, 0), m), dtype=float).reshape(m, d)
    k = split.dim_x
    mean = np.array(np.broadcast_to(split.x0.mean, (m, k)))
    cov = np.array(np.broadcast_to(split.x0.cov, (m, k, k)))
    prev_w = np.full(m, 1.0 / m)
    store = AncestryStore(N, m, d)
    x_mean = np.empty((N, P.shape[0]))
    x_sd = np.empty((N, P.shape[0]))
    inc = np.zeros(N)
    ess = np.empty(N)
    res = np.zeros(N, dtype=bool)
    bad = 0
    for i in range(N):
        rng = step_rng(seed, i + 1)
        theta = split.theta_step(theta, rng)
        F, G, H, Q, R = split.conditional(theta)
        mean, cov = batch_predict(mean, cov, F, G, Q)
        y = ys[i]
        if math.isnan(y):
            w = prev_w
            anc = np.arange(m)
        else:
            mean, cov, e, r = batch_update(mean, cov, y, H, R)
            with np.errstate(divide="ignore", invalid="ignore"):
                ll = gaussian_logpdf(e, r)
            nonpos = ~(r > 0)
            if nonpos.any():
                bad += int(nonpos.sum())
                ll = np.where(nonpos, -np.inf, ll)
            inc[i] = log_mean_weight(prev_w, ll)
            if not np.isfinite(inc[i]):
                raise FloatingPointError(f"all particle likelihoods vanish at n={i + 1}")
            with np.errstate(divide="ignore"):
                lw = np.log(prev_w) + ll
            w = normalize_logweights(lw)
        pm, pv = _project_moments(P, mean, cov)
        x_mean[i], x_sd[i] = rb_mixture_moments(w, pm, pv)
        ess[i] = 1.0 / np.dot(w, w)
        if not math.isnan(y) and policy.needed(ess[i], m):
            anc = policy.draw(np.log(w), m, rng)
            res[i] = True
        else:
            anc = np.arange(m)
        store.record(i, theta, w, anc)
        if i == N - 1:
            final = (theta.copy(), mean.copy(), cov.copy(), w.copy())
        if res[i]:
            theta, mean, cov = theta[anc], mean[anc], cov[anc]
            prev_w = np.full(m, 1.0 / m)
        else:
            prev_w = w
    if bad:
        warnings.warn(f"{bad} particle updates had nonpositive innovation variance", stacklevel=2)
    ll = 0.0
    for v in inc:
        ll += float(v)
    return RBPFRun(split, ys, m, seed, store, labels, x_mean, x_sd, inc, ll, EssReport(ess, res),
                   *final, bad_variance=bad, timings={"filter": time.perf_counter() - t0})


def _dedupe_paths(paths, weights):
    """Merge identical trajectories, summing their weights."""
    m = paths.shape[0]
    if m == 1:
        return paths, weights
    flat = paths.reshape(m, -1)
    uniq, first, inv = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    if uniq.shape[0] == m:
        return paths, weights
    order = np.argsort(first)  # keep first-appearance order for determinism
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    w = np.bincount(remap[inv.reshape(-1)], weights=weights, minlength=order.size)
    return paths[np.sort(first)], w


def smooth_paths(split, ys, paths, chunk_bytes: float = DEFAULT_CHUNK_BYTES):
    """Kalman filter + fixed-interval smoother under each theta path.

    ``paths`` is (B, N, d).  Returns projected smoothed means and variances
    (N, B, c), per-path log-likelihoods (B,) and a pseudo-inverse flag.
    """
    ys = np.asarray(ys, dtype=float)
    B, N, _ = paths.shape
    P, _ = _projection(split)
    k = split.dim_x
    per = N * (k * k + k) * 8.0 * 2
    chunk = max(1, int(chunk_bytes // per))
    means = np.empty((N, B, P.shape[0]))
    varis = np.empty((N, B, P.shape[0]))
    logl = np.empty(B)
    flag = False
    for s in range(0, B, chunk):
        sub = paths[s: s + chunk]
        pieces = split.path_pieces(sub)
        bf = batch_filter(ys, split.x0.mean, split.x0.cov, pieces, sub.shape[0], store_pred=False)
        mm, vv, f = rts_backward(bf.filt_mean, bf.filt_cov, pieces, project=P)
        means[:, s: s + chunk] = mm
        varis[:, s: s + chunk] = vv
        for j in range(sub.shape[0]):
            acc = 0.0
            for v in bf.increments[:, j]:
                acc += float(v)
            logl[s + j] = acc
        flag |= f
    return means, varis, logl, flag


def rbpf_smooth(split, ys, m: int, lag: int, seed: int, run: RBPFRun | None = None,
                chunk_bytes: float = DEFAULT_CHUNK_BYTES, policy: ResamplePolicy = ResamplePolicy()
                ) -> RunSummary:
    """RB-PF filter and smoother summaries.

    Theta is smoothed by fixed-lag ancestry.  The state is smoothed by a
    Kalman smoother along the full theta trajectory of every final particle
    and mixed with the final weights.  A precomputed ``run`` can be passed to
    share the forward pass.
    """
    if run is None:
        run = rbpf_filter(split, ys, m, seed, policy)
    out = rb_filter_summary(run, "RB-PF")
    t0 = time.perf_counter()
    th_m, th_s = run.theta_summary(lag)
    paths, W = run.store.trajectories()
    paths, W = _dedupe_paths(paths, W)
    means, varis, _, flag = smooth_paths(split, run.ys, paths, chunk_bytes)
    out.timings["smoother"] = time.perf_counter() - t0
    for c, lab in enumerate(run.labels):
        mu, sd = rb_mixture_moments(W, means[:, :, c].T, varis[:, :, c].T)
        out.smoother[lab] = summarize_bands(mu, sd)
    for j, nm in enumerate(split.names):
        out.smoother[f"log10_{nm}"] = summarize_bands(th_m[:, j], th_s[:, j])
    out.info.update(lag=lag, distinct_paths=int(paths.shape[0]), used_pinv=bool(flag))
    return out


def rb_filter_summary(run: RBPFRun, method: str) -> RunSummary:
    out = RunSummary(method, loglik=run.loglik)
    for c, lab in enumerate(run.labels):
        out.filter[lab] = summarize_bands(run.x_mean[:, c], run.x_sd[:, c])
    th_m, th_s = run.theta_summary(None)
    for j, nm in enumerate(run.split.names):
        out.filter[f"log10_{nm}"] = summarize_bands(th_m[:, j], th_s[:, j])
    out.timings["filter"] = run.timings["filter"]
    out.info.update(m=run.m, seed=run.seed, min_ess=float(run.ess.ess.min()))
    return out


# ---------------------------------------------------------------------------
# Grid over theta
# ---------------------------------------------------------------------------


@dataclass
class RBGridNode:
    theta: np.ndarray
    belief: GaussianBelief
    weight: float


@dataclass
class RBNGFRun:
    split: object
    ys: np.ndarray
    axes: tuple
    nodes: np.ndarray  # (B, d) node coordinates, C order over the axes
    filtered: np.ndarray  # (N, *grid shape) theta densities
    labels: list
    x_mean: np.ndarray
    x_sd: np.ndarray
    increments: np.ndarray
    loglik: float
    final_mean: np.ndarray
    final_cov: np.ndarray
    merged: bool
    timings: dict = field(default_factory=dict)

    @property
    def kernel(self):
        return GaussianWalkKernel(self.axes, self.split.walk_sd)

    def node(self, j: int) -> RBGridNode:
        W = trapezoid_mass(self.axes, self.filtered[-1]).reshape(-1)
        return RBGridNode(self.nodes[j].copy(),
                          GaussianBelief(self.final_mean[j].copy(), self.final_cov[j].copy(), len(self.ys), "filtered"),
                          float(W[j]))


def trapezoid_mass(axes, density):
    """Probability mass per node: density x trapezoid cell weight, normalized."""
    w = np.ones(())
    for a in axes:
        w = np.multiply.outer(w, trapezoid_weights(a))
    mass = density * w
    return mass / mass.sum()


def _theta_axes(split, nodes, bounds=None):
    if isinstance(nodes, (list, tuple)) and len(nodes) and np.ndim(nodes[0]) == 1:
        return tuple(np.asarray(a, dtype=float) for a in nodes)
    d = split.param_dim
    counts = np.broadcast_to(np.asarray(nodes, dtype=int), (d,))
    bounds = np.asarray(bounds if bounds is not None else split.aug.bounds, dtype=float)
    return tuple(np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2])
                 for (lo, hi), c in zip(bounds, counts))


def rbngf_filter(split, nodes, ys, bounds=None, cap: int = 2**22, merge: bool = True) -> RBNGFRun:
    """Grid over theta with a Kalman filter attached to every node.

    ``nodes`` is a node count per parameter (spread over ``bounds``) or a
    tuple of explicit axes.  With a positive walk sd the grid weights are
    moved by the random-walk kernel each step; when ``merge`` is set the node
    beliefs are moment-matched over the same kernel, otherwise each node
    keeps the belief computed under its own constant theta.
    """
    t0 = time.perf_counter()
    ys = as_series(ys).values
    N = ys.size
    axes = _theta_axes(split, nodes, bounds)
    shape = tuple(a.size for a in axes)
    B = int(np.prod(shape))
    if B > cap:
        raise MemoryError(f"grid of {B} nodes exceeds the cap of {cap}")
    mesh = np.meshgrid(*axes, indexing="ij")
    theta = np.stack([g.reshape(-1) for g in mesh], axis=-1)
    with np.errstate(divide="ignore"):
        logp = np.asarray(split.prior.logpdf(theta), dtype=float).reshape(shape)
    if not np.any(np.isfinite(logp)):
        raise ValueError("parameter prior has no mass on the grid")
    grid = DensityGrid(axes, np.exp(logp - logp.max())).normalize()
    kernel = GaussianWalkKernel(axes, split.walk_sd)
    moving = not all(c.identity for c in kernel.convs)

    P, labels = _projection(split)
    k = split.dim_x
    mean = np.array(np.broadcast_to(split.x0.mean, (B, k)))
    cov = np.array(np.broadcast_to(split.x0.cov, (B, k, k)))
    F, G, H, Q, R = split.conditional(theta)
    filt = np.empty((N,) + shape)
    inc = np.zeros(N)
    x_mean = np.empty((N, P.shape[0]))
    x_sd = np.empty((N, P.shape[0]))
    for i in range(N):
        if moving:
            dens = grid.density
            pred = kernel.forward(dens)
            if merge:
                mean, cov = _merge_beliefs(kernel, axes, dens, pred, mean, cov)
            grid = DensityGrid(axes, pred).normalize()
        mean, cov = batch_predict(mean, cov, F, G, Q)
        y = ys[i]
        if not math.isnan(y):
            mean, cov, e, r = batch_update(mean, cov, y, H, R)
            with np.errstate(divide="ignore", invalid="ignore"):
                ll = np.where(r > 0, gaussian_logpdf(e, r), -np.inf)
            grid, inc[i] = ngf_update(grid, ll.reshape(shape), log=True)
        filt[i] = grid.density
        W = trapezoid_mass(axes, grid.density).reshape(-1)
        pm, pv = _project_moments(P, mean, cov)
        x_mean[i], x_sd[i] = rb_mixture_moments(W, pm, pv)
    ll = 0.0
    for v in inc:
        ll += float(v)
    return RBNGFRun(split, ys, axes, theta, filt, labels, x_mean, x_sd, inc, ll, mean, cov,
                    merge and moving, {"filter": time.perf_counter() - t0})


def _merge_beliefs(kernel, axes, dens, pred, mean, cov):
    """Moment-match node beliefs through the parameter transition kernel.

    Moments are taken about the grid-average mean to limit cancellation.
    """
    B, k = mean.shape
    shape = dens.shape
    ref = np.tensordot(trapezoid_mass(axes, dens).reshape(-1), mean, axes=(0, 0))
    dm = mean - ref
    p = dens.reshape(shape + (1,))
    m1 = kernel.forward(p * dm.reshape(shape + (k,)), clip=False)
    second = cov + dm[:, :, None] * dm[:, None, :]
    m2 = kernel.forward(p[..., None] * second.reshape(shape + (k, k)), clip=False)
    ok = (pred > 0).reshape(-1)
    denom = np.where(ok, pred.reshape(-1), 1.0)
    new_dm = m1.reshape(B, k) / denom[:, None]
    new_cov = m2.reshape(B, k, k) / denom[:, None, None] - new_dm[:, :, None] * new_dm[:, None, :]
    new_cov = 0.5 * (new_cov + np.swapaxes(new_cov, 1, 2))
    mean = np.where(ok[:, None], ref + new_dm, mean)
    cov = np.where(ok[:, None, None], new_cov, cov)
    return mean, cov


def rbngf_smooth(run: RBNGFRun, chunk_bytes: float = DEFAULT_CHUNK_BYTES) -> RunSummary:
    """Smoothed theta grid weights and mixed state summaries.

    The theta densities follow the backward grid recursion; the state given
    each node is smoothed by a Kalman smoother under that node's constant
    theta, which is exact for a static parameter.
    """
    out = RunSummary("RB-NGF", loglik=run.loglik)
    for c, lab in enumerate(run.labels):
        out.filter[lab] = summarize_bands(run.x_mean[:, c], run.x_sd[:, c])
    names = run.split.names
    d = len(names)
    out.timings["filter"] = run.timings["filter"]
    t0 = time.perf_counter()
    kernel = run.kernel
    if all(c.identity for c in kernel.convs):
        sm = np.broadcast_to(run.filtered[-1], run.filtered.shape)
        underflow = 0
    else:
        sm, underflow = ngf_smooth(NGFRun(run.axes, run.filtered, run.increments, run.loglik), kernel)
    N = run.filtered.shape[0]
    paths = np.broadcast_to(run.nodes[:, None, :], (run.nodes.shape[0], N, d))
    means, varis, _, flag = smooth_paths(run.split, run.ys, paths, chunk_bytes)
    out.timings["smoother"] = time.perf_counter() - t0
    for c, lab in enumerate(run.labels):
        mu = np.empty(N)
        sd = np.empty(N)
        for i in range(N):
            W = trapezoid_mass(run.axes, sm[i]).reshape(-1)
            mu[i], sd[i] = rb_mixture_moments(W, means[i, :, c], varis[i, :, c])
        out.smoother[lab] = summarize_bands(mu, sd)
    for stage, dens in (("filter", run.filtered), ("smoother", sm)):
        for j, nm in enumerate(names):
            mu, sd = _grid_theta_stats(run.axes, dens, j)
            getattr(out, stage)[f"log10_{nm}"] = summarize_bands(mu, sd)
    out.info.update(nodes=[a.size for a in run.axes], underflow_cells=int(underflow),
                    merged=run.merged, used_pinv=bool(flag))
    return out


def _grid_theta_stats(axes, dens, j):
    N = dens.shape[0]
    mu = np.empty(N)
    sd = np.empty(N)
    for i in range(N):
        W = trapezoid_mass(axes, dens[i])
        marg = W.sum(axis=tuple(a for a in range(len(axes)) if a != j))
        x = axes[j]
        mu[i] = marg @ x
        sd[i] = math.sqrt(max(marg @ (x - mu[i]) ** 2, 0.0))
    return mu, sd


def rbngf_run(split, nodes, ys, bounds=None, smooth: bool = True, merge: bool = True) -> RunSummary:
    run = rbngf_filter(split, nodes, ys, bounds, merge=merge)
    if smooth:
        return rbngf_smooth(run)
    out = RunSummary("RB-NGF", loglik=run.loglik)
    for c, lab in enumerate(run.labels):
        out.filter[lab] = summarize_bands(run.x_mean[:, c], run.x_sd[:, c])
    for j, nm in enumerate(run.split.names):
        out.filter[f"log10_{nm}"] = summarize_bands(*_grid_theta_stats(run.axes, run.filtered, j))
    out.timings["filter"] = run.timings["filter"]
    return out
