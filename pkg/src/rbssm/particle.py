"""Bootstrap particle filter with stratified resampling and fixed-lag smoothing.

Random numbers for step ``n`` come from ``default_rng([seed, n])``; row ``i``
of every draw belongs to particle ``i``.  The whole run is therefore a pure
function of (model, data, m, seed) whatever the evaluation order.

Fixed-lag smoothing keeps, for every time, the weighted particle values
before resampling and the ancestor indices chosen by the resampler.  The
time-n value carried by a particle alive at a later time is recovered by
following those indices backwards, which is equivalent to rewriting a
per-particle history window on every resample but costs O(N m) memory
instead of O(N m lag) copying.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import RunSummary, as_series, normalize_logweights, summarize_bands
from .kalman import LinearGaussianSSM
from .models import AugmentedSSM

# ---------------------------------------------------------------------------
# Random streams and resampling
# ---------------------------------------------------------------------------


def step_rng(seed: int, n: int) -> np.random.Generator:
    """Generator for time step ``n`` (0 = initialization) of run ``seed``."""
    return np.random.default_rng([int(seed), int(n)])


def _check_weights(logweights):
    lw = np.asarray(logweights, dtype=float)
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise FloatingPointError("non-finite log-weights")
    return normalize_logweights(lw)


def resample_stratified(logweights, m: int, rng: np.random.Generator) -> np.ndarray:
    """Residual-stratified resampling; returns nondecreasing ancestor indices.

    Particle j first receives floor(m w_j) copies.  The R remaining slots are
    filled by stratified sampling on the residual weights, one uniform draw
    (i + u_i) / R in each of the R strata.  Every particle is copied between
    floor(m w_j) and ceil(m w_j) + 1 times and the expected count is m w_j.
    """
    w = _check_weights(logweights)
    mw = m * w
    base = np.floor(mw).astype(np.int64)
    R = int(m - base.sum())
    counts = base
    if R > 0:
        resid = mw - base
        cdf = np.cumsum(resid)
        cdf /= cdf[-1]
        cdf[-1] = 1.0
        u = (np.arange(R) + rng.random(R)) / R
        extra = np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)
        counts = counts + np.bincount(extra, minlength=w.size)
    return np.repeat(np.arange(w.size), counts)


def resample_systematic(logweights, m: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling with a single uniform offset shared by all strata."""
    w = _check_weights(logweights)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    u = (np.arange(m) + rng.random()) / m
    return np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)


RESAMPLERS = {"stratified": resample_stratified, "systematic": resample_systematic}


@dataclass(frozen=True)
class ResamplePolicy:
    """When and how to resample.  ``every`` resamples at each observed step;
    ``ess`` only when the effective sample size drops below ``threshold * m``."""

    when: str = "every"
    scheme: str = "stratified"
    threshold: float = 0.5

    def __post_init__(self):
        if self.when not in ("every", "ess"):
            raise ValueError(f"unknown resampling rule {self.when!r}")
        if self.scheme not in RESAMPLERS:
            raise ValueError(f"unknown resampling scheme {self.scheme!r}")

    def needed(self, ess: float, m: int) -> bool:
        return self.when == "every" or ess < self.threshold * m

    def draw(self, logweights, m, rng):
        return RESAMPLERS[self.scheme](logweights, m, rng)


def log_mean_weight(prev_w, ll) -> float:
    """log sum_i prev_w_i exp(ll_i), computed with max subtraction."""
    mx = np.max(ll)
    if not np.isfinite(mx):
        return -math.inf
    return float(mx + math.log(np.dot(prev_w, np.exp(ll - mx))))


# ---------------------------------------------------------------------------
# Particle clouds
# ---------------------------------------------------------------------------


@dataclass
class ParticleCloud:
    """Weighted particles (m, dim) with log-weights; ``n`` is the current time."""

    particles: np.ndarray
    logweights: np.ndarray
    seed: int
    n: int = 0

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.particles.ndim == 1:
            self.particles = self.particles[:, None]
        if self.particles.shape[0] < 1:
            raise ValueError("a cloud needs at least one particle")
        self.logweights = np.asarray(self.logweights, dtype=float)

    @property
    def m(self) -> int:
        return self.particles.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return normalize_logweights(self.logweights)

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.dot(w, w))


@dataclass
class EssReport:
    ess: np.ndarray
    resampled: np.ndarray


def pf_init(sampler, m: int, seed: int) -> ParticleCloud:
    """Draw ``m`` particles with ``sampler(rng, m)`` using the time-0 stream."""
    if m < 1:
        raise ValueError("m must be at least 1")
    parts = np.asarray(sampler(step_rng(seed, 0), m), dtype=float)
    return ParticleCloud(parts, np.zeros(parts.shape[0]), seed, 0)


@dataclass
class StepResult:
    cloud: ParticleCloud  # after resampling
    increment: float
    ess: float
    resampled: bool
    weighted: np.ndarray  # particles before resampling
    weights: np.ndarray  # their normalized weights
    ancestors: np.ndarray  # parent index (into ``weighted``) of each new particle


def pf_step(cloud: ParticleCloud, model, y, policy: ResamplePolicy = ResamplePolicy()) -> StepResult:
    """Propagate, weight by the observation density and resample.

    ``model`` provides ``transition(particles, n, rng)`` and
    ``loglik(particles, y, n)``.  A missing ``y`` skips weighting and
    resampling.
    """
    n = cloud.n + 1
    rng = step_rng(cloud.seed, n)
    prev_w = cloud.weights
    parts = model.transition(cloud.particles, n, rng)
    m = parts.shape[0]
    if y is None or math.isnan(y):
        lw = np.log(prev_w)
        ess = float(1.0 / np.dot(prev_w, prev_w))
        anc = np.arange(m)
        return StepResult(ParticleCloud(parts, lw, cloud.seed, n), 0.0, ess, False, parts, prev_w, anc)
    ll = np.asarray(model.loglik(parts, y, n), dtype=float)
    inc = log_mean_weight(prev_w, ll)
    if not np.isfinite(inc):
        raise FloatingPointError(f"all particle weights are zero at n={n}")
    lw = np.log(prev_w) + ll
    w = normalize_logweights(lw)
    ess = float(1.0 / np.dot(w, w))
    if policy.needed(ess, m):
        anc = policy.draw(lw, m, rng)
        new = ParticleCloud(parts[anc], np.zeros(m), cloud.seed, n)
        return StepResult(new, inc, ess, True, parts, w, anc)
    return StepResult(ParticleCloud(parts, np.log(w), cloud.seed, n), inc, ess, False, parts, w,
                      np.arange(m))


# ---------------------------------------------------------------------------
# Ancestry storage and fixed-lag summaries
# ---------------------------------------------------------------------------


class AncestryStore:
    """Per-time weighted values and resampling ancestors.

    ``values[i]`` (m, c) are the particle values at time i + 1 before
    resampling, ``weights[i]`` their normalized weights and ``parents[i]``
    the index into ``values[i - 1]`` of each particle's predecessor.
    """

    def __init__(self, N: int, m: int, c: int):
        self.values = np.empty((N, m, c))
        self.weights = np.empty((N, m))
        self.parents = np.empty((N, m), dtype=np.int64)
        self.parents[0] = np.arange(m)
        self._pending = np.arange(m)

    @property
    def N(self):
        return self.values.shape[0]

    def record(self, i: int, values, weights, ancestors) -> None:
        """Store step i; ``ancestors`` are the resampling indices chosen after it."""
        self.values[i] = values
        self.weights[i] = weights
        self.parents[i] = self._pending
        self._pending = np.asarray(ancestors)

    def filter_marginals(self):
        for i in range(self.N):
            yield i, self.values[i], self.weights[i]

    def fixed_lag_marginals(self, lag: int):
        """Yield (i, values, weights): the time-i values carried by the
        particles of time min(i + lag, N - 1), with that time's weights."""
        if lag < 0:
            raise ValueError("lag must be nonnegative")
        N = self.N
        # Times whose lag window reaches the end share one trace from N - 1.
        start = max(N - 1 - lag, 0)
        idx = np.arange(self.values.shape[1])
        wN = self.weights[N - 1]
        tail = []
        for i in range(N - 1, start - 1, -1):
            tail.append((i, self.values[i][idx], wN))
            if i > 0:
                idx = self.parents[i][idx]
        for i in range(start):
            j = i + lag
            idx = np.arange(self.values.shape[1])
            for t in range(j, i, -1):
                idx = self.parents[t][idx]
            yield i, self.values[i][idx], self.weights[j]
        yield from reversed(tail)

    def trajectories(self):
        """Full paths (m, N, c) of the final weighted particles and their weights."""
        N, m, c = self.values.shape
        out = np.empty((m, N, c))
        idx = np.arange(m)
        for i in range(N - 1, -1, -1):
            out[:, i] = self.values[i][idx]
            if i > 0:
                idx = self.parents[i][idx]
        return out, self.weights[N - 1].copy()

    def summarize(self, marginals):
        N, _, c = self.values.shape
        mean = np.empty((N, c))
        sd = np.empty((N, c))
        for i, v, w in marginals:
            mu = w @ v
            mean[i] = mu
            sd[i] = np.sqrt(np.maximum(w @ (v - mu) ** 2, 0.0))
        return mean, sd


# ---------------------------------------------------------------------------
# Models as seen by the particle filter
# ---------------------------------------------------------------------------


def _gauss_sampler(mean, cov):
    w, V = np.linalg.eigh(np.asarray(cov, dtype=float))
    L = V * np.sqrt(np.maximum(w, 0.0))
    return lambda rng, m: mean + rng.standard_normal((m, mean.size)) @ L.T


def _noise_factor(Q):
    if Q.ndim == 2:
        w, V = np.linalg.eigh(Q)
        return V * np.sqrt(np.maximum(w, 0.0))
    return np.sqrt(np.maximum(np.diagonal(Q, axis1=-2, axis2=-1), 0.0))


class LinearPF:
    """A linear-Gaussian model propagated by simulation."""

    def __init__(self, model: LinearGaussianSSM):
        self.model = model
        self.dim = model.dim_x
        self.sampler = _gauss_sampler(model.x0.mean, model.x0.cov)

    def transition(self, x, n, rng):
        F, G, H, Q, R = self.model.matrices(n)
        v = rng.standard_normal((x.shape[0], G.shape[1])) @ _noise_factor(Q).T
        return x @ F.T + v @ G.T

    def loglik(self, x, y, n):
        F, G, H, Q, R = self.model.matrices(n)
        e = y - x @ H
        return -0.5 * (math.log(2 * math.pi * R) + e * e / R)


class AugmentedPF:
    """Self-organizing model z = (x, theta).

    Each step moves theta by its random walk first and then draws the state
    noise with the variances implied by the new theta.
    """

    def __init__(self, aug: AugmentedSSM):
        self.aug = aug
        self.k = aug.dim_x
        self.d = aug.param_dim
        self.dim = self.k + self.d
        F, G, H = aug.conditional(np.zeros((1, self.d)))[:3]
        self.F, self.G, self.H = F, G, H
        xs = _gauss_sampler(aug.x0.mean, aug.x0.cov)
        self.sampler = lambda rng, m: np.hstack([xs(rng, m), aug.prior.sample(rng, m)])

    def transition(self, z, n, rng):
        m = z.shape[0]
        ell = self.G.shape[1]
        noise = rng.standard_normal((m, self.d + ell))
        theta = z[:, self.k:] + self.aug.walk_sd * noise[:, : self.d]
        _, _, _, Q, _ = self.aug.conditional(theta)
        v = noise[:, self.d:] * _noise_factor(Q)
        x = z[:, : self.k] @ self.F.T + v @ self.G.T
        return np.hstack([x, theta])

    def loglik(self, z, y, n):
        R = self.aug.conditional(z[:, self.k:])[4]
        e = y - z[:, : self.k] @ self.H
        return -0.5 * (np.log(2 * np.pi * R) + e * e / R)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


@dataclass
class PFRun:
    store: AncestryStore
    labels: list
    increments: np.ndarray
    loglik: float
    ess: EssReport
    final: ParticleCloud
    timings: dict = field(default_factory=dict)

    def filter_summary(self):
        return self.store.summarize(self.store.filter_marginals())


def pf_filter(model, ys, m: int, seed: int, project=None, labels=None,
              policy: ResamplePolicy = ResamplePolicy()) -> PFRun:
    """Run the bootstrap filter storing ``particles @ project.T`` per time.

    ``project`` (c, dim) selects the summarized coordinates (identity by default).
    """
    ys = as_series(ys).values
    N = ys.size
    project = np.eye(model.dim) if project is None else np.asarray(project, dtype=float)
    labels = labels or [f"x{j}" for j in range(project.shape[0])]
    t0 = time.perf_counter()
    cloud = pf_init(model.sampler, m, seed)
    store = AncestryStore(N, m, project.shape[0])
    inc = np.zeros(N)
    ess = np.empty(N)
    res = np.zeros(N, dtype=bool)
    for i in range(N):
        st = pf_step(cloud, model, ys[i], policy)
        store.record(i, st.weighted @ project.T, st.weights, st.ancestors)
        inc[i], ess[i], res[i] = st.increment, st.ess, st.resampled
        cloud = st.cloud
    ll = 0.0
    for v in inc:
        ll += float(v)
    return PFRun(store, labels, inc, ll, EssReport(ess, res), cloud,
                 {"filter": time.perf_counter() - t0})


def pf_fixed_lag_smooth(run: PFRun, lag: int):
    """Fixed-lag smoothed (mean, sd) per time and coordinate."""
    return run.store.summarize(run.store.fixed_lag_marginals(lag))


def augmented_projection(aug: AugmentedSSM):
    """Rows selecting every component and parameter of z = (x, theta), with labels."""
    k, d = aug.dim_x, aug.param_dim
    rows, labels = [], []
    for name, sel in aug.components.items():
        rows.append(np.concatenate([sel, np.zeros(d)]))
        labels.append(name)
    for j, nm in enumerate(aug.names):
        e = np.zeros(k + d)
        e[k + j] = 1.0
        rows.append(e)
        labels.append(f"log10_{nm}")
    return np.array(rows), labels


def sof_pf_run(aug: AugmentedSSM, ys, m: int, lag: int, seed: int, smooth: bool = True,
               policy: ResamplePolicy = ResamplePolicy()) -> RunSummary:
    """Self-organizing particle filter over z = (x, theta) with fixed-lag smoothing."""
    P, labels = augmented_projection(aug)
    run = pf_filter(AugmentedPF(aug), ys, m, seed, P, labels, policy)
    out = RunSummary("PF", loglik=run.loglik)
    fm, fs = run.filter_summary()
    for j, lab in enumerate(labels):
        out.filter[lab] = summarize_bands(fm[:, j], fs[:, j])
    out.timings["filter"] = run.timings["filter"]
    if smooth:
        t0 = time.perf_counter()
        sm, ss = pf_fixed_lag_smooth(run, lag)
        out.timings["smoother"] = time.perf_counter() - t0
        for j, lab in enumerate(labels):
            out.smoother[lab] = summarize_bands(sm[:, j], ss[:, j])
    out.info.update(m=m, lag=lag, seed=seed, min_ess=float(run.ess.ess.min()))
    return out
