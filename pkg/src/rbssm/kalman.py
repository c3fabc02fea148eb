"""Linear-Gaussian inference: prediction, filtering, smoothing, likelihood, ML fit.

All recursions run on a *batch* of independent filters at once (leading axis
``B``).  A single model is the batch-of-one case, so the plain Kalman filter,
the Rao-Blackwellized particle filter and the grid methods all share the same
arithmetic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .core import GaussianBelief, ParamVector, TimeSeries, as_series

# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianSSM:
    """x_n = F_n x_{n-1} + G_n v_n,  y_n = H_n x_n + w_n.

    ``F, G, H, Q`` may be arrays (time-invariant) or callables of the 1-based
    time index ``n``.  ``R`` is a scalar or a callable returning one.
    """

    F: np.ndarray | Callable
    G: np.ndarray | Callable
    H: np.ndarray | Callable
    Q: np.ndarray | Callable
    R: float | Callable
    x0: GaussianBelief
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("F", "G", "H", "Q"):
            val = getattr(self, name)
            if not callable(val):
                arr = np.array(val, dtype=float, ndmin=2)
                if name == "H":
                    arr = arr.reshape(-1)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if not callable(self.R):
            object.__setattr__(self, "R", float(self.R))
        self.validate(1)

    @property
    def dim_x(self) -> int:
        return self.x0.dim

    @property
    def dim_v(self) -> int:
        return self.matrices(1)[1].shape[1]

    def matrices(self, n: int):
        """(F, G, H, Q, R) at time n, with H as a length-k vector."""
        get = lambda v: v(n) if callable(v) else v
        F = np.asarray(get(self.F), dtype=float)
        G = np.asarray(get(self.G), dtype=float)
        H = np.asarray(get(self.H), dtype=float).reshape(-1)
        Q = np.asarray(get(self.Q), dtype=float)
        R = float(get(self.R))
        return F, G, H, Q, R

    def validate(self, n: int) -> None:
        F, G, H, Q, R = self.matrices(n)
        k = self.x0.dim
        if F.shape != (k, k):
            raise ValueError(f"F has shape {F.shape}, expected {(k, k)}")
        if G.ndim != 2 or G.shape[0] != k:
            raise ValueError(f"G has shape {G.shape}, expected ({k}, l)")
        ell = G.shape[1]
        if H.shape != (k,):
            raise ValueError(f"H has {H.size} entries, expected {k}")
        if Q.shape != (ell, ell):
            raise ValueError(f"Q has shape {Q.shape}, expected {(ell, ell)}")
        if np.abs(Q - Q.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(Q).max(initial=0.0)):
            raise ValueError("Q is not symmetric")
        if ell and np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, np.trace(Q)):
            raise ValueError("Q is not positive semidefinite")
        if R < 0:
            raise ValueError("R must be nonnegative")
        if R == 0 and not np.any(G @ Q @ G.T):
            raise ValueError("system and observation noise are both zero")

    def pieces(self, i: int):
        """Batch-of-one matrices for 0-based array index ``i`` (time i + 1)."""
        F, G, H, Q, R = self.matrices(i + 1)
        return F, G, H, Q[None], np.array([R])


# ---------------------------------------------------------------------------
# Batched recursions
# ---------------------------------------------------------------------------


def _T(a):
    return np.swapaxes(a, -1, -2)


def batch_predict(mean, cov, F, G, Q):
    """One-step prediction for a batch.

    mean (B,k), cov (B,k,k); F (k,k)|(B,k,k); G (k,l)|(B,k,l); Q (B,l,l).
    The result is exactly symmetric.
    """
    B, k = mean.shape
    if F.ndim == 2:
        mp = mean @ F.T
        # cov F' as one (B*k, k) product, then F (cov F') batched
        buf = (cov.reshape(B * k, k) @ F.T).reshape(B, k, k)
        cp = np.matmul(F, buf)
    else:
        mp = np.einsum("bij,bj->bi", F, mean)
        cp = F @ cov @ _T(F)
        buf = np.empty_like(cp)
    if G.ndim == 2:
        # G Q G' only touches the rows/columns where G is nonzero
        rows = np.flatnonzero(np.any(G != 0, axis=1))
        Gs = G[rows]
        cp[:, rows[:, None], rows] += np.matmul(Gs, np.matmul(Q, Gs.T))
    else:
        cp += G @ Q @ _T(G)
    np.add(cp, _T(cp), out=buf)
    buf *= 0.5
    return mp, buf


def batch_update(mean, cov, y, H, R, joseph: bool = False):
    """Scalar-observation update for a batch.

    Returns (mean, cov, residual, r) where r = H V H' + R is the innovation
    variance.  H is (k,) or (B,k); R is (B,).  The simple form
    V - (V H')(V H')' / r is used unless ``joseph`` is set; the outer
    product is formed before dividing so symmetry is preserved exactly.
    """
    if H.ndim == 1:
        vh = cov @ H
        e = y - mean @ H
        r = vh @ H + R
    else:
        vh = np.einsum("bij,bj->bi", cov, H)
        e = y - np.einsum("bi,bi->b", mean, H)
        r = np.einsum("bi,bi->b", vh, H) + R
    with np.errstate(divide="ignore", invalid="ignore"):
        mf = mean + vh * (e / r)[:, None]
        if joseph:
            gain = vh / r[:, None]
            Hm = np.broadcast_to(H, mean.shape)
            ikh = np.eye(mean.shape[1]) - gain[:, :, None] * Hm[:, None, :]
            cf = ikh @ cov @ _T(ikh) + (gain[:, :, None] * gain[:, None, :]) * R[:, None, None]
            cf += _T(cf)
            cf *= 0.5
        else:
            cf = vh[:, :, None] * vh[:, None, :]
            cf /= r[:, None, None]
            np.subtract(cov, cf, out=cf)
    return mf, cf, e, r


def gaussian_logpdf(e, r):
    return -0.5 * (np.log(2.0 * np.pi * r) + e * e / r)


@dataclass
class BatchRun:
    """Stored output of :func:`batch_filter`; arrays are indexed (time, batch, ...)."""

    pred_mean: np.ndarray | None
    pred_cov: np.ndarray | None
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    resid: np.ndarray
    rvar: np.ndarray
    increments: np.ndarray
    loglik: np.ndarray


def batch_filter(ys, x0_mean, x0_cov, pieces: Callable, batch: int,
                 store_pred: bool = True, joseph: bool = False) -> BatchRun:
    """Run ``batch`` Kalman filters over the same observations.

    ``pieces(i)`` gives (F, G, H, Q, R) for array index i in the shapes
    accepted by :func:`batch_predict` / :func:`batch_update`.
    """
    ys = np.asarray(ys, dtype=float)
    N = ys.size
    x0_mean = np.asarray(x0_mean, dtype=float)
    x0_cov = np.asarray(x0_cov, dtype=float)
    k = x0_mean.shape[-1]
    mean = np.array(np.broadcast_to(x0_mean, (batch, k)))
    cov = np.array(np.broadcast_to(x0_cov, (batch, k, k)))
    pm = np.empty((N, batch, k)) if store_pred else None
    pc = np.empty((N, batch, k, k)) if store_pred else None
    fm = np.empty((N, batch, k))
    fc = np.empty((N, batch, k, k))
    resid = np.full((N, batch), np.nan)
    rvar = np.full((N, batch), np.nan)
    inc = np.zeros((N, batch))
    for i in range(N):
        F, G, H, Q, R = pieces(i)
        mean, cov = batch_predict(mean, cov, F, G, Q)
        if store_pred:
            pm[i] = mean
            pc[i] = cov
        y = ys[i]
        if not math.isnan(y):
            mean, cov, e, r = batch_update(mean, cov, y, H, R, joseph=joseph)
            if np.any(r <= 0):
                raise FloatingPointError(f"nonpositive innovation variance at n={i + 1}")
            resid[i] = e
            rvar[i] = r
            inc[i] = gaussian_logpdf(e, r)
        fm[i] = mean
        fc[i] = cov
    return BatchRun(pm, pc, fm, fc, resid, rvar, inc, inc.sum(axis=0))


def _cholesky_solve(V, R):
    """Solve V X = R for a batch of SPD V by Cholesky and vectorized substitution.

    For small k this beats the batched LU in ``np.linalg.solve`` severalfold.
    """
    L = np.linalg.cholesky(V)
    k = V.shape[-1]
    Y = np.empty_like(R)
    for i in range(k):
        Y[:, i] = (R[:, i] - np.einsum("bj,bjr->br", L[:, i, :i], Y[:, :i])) / L[:, i, i, None]
    X = np.empty_like(R)
    for i in range(k - 1, -1, -1):
        X[:, i] = (Y[:, i] - np.einsum("bj,bjr->br", L[:, i + 1:, i], X[:, i + 1:])) / L[:, i, i, None]
    return X


def _solve_gain(Vp, FVf):
    """A' = Vp^{-1} F Vf for a batch; pseudo-inverse when Vp is singular."""
    for solver in (_cholesky_solve, np.linalg.solve):
        try:
            At = solver(Vp, FVf)
            if np.all(np.isfinite(At)):
                return At, False
        except np.linalg.LinAlgError:
            pass
    return np.linalg.pinv(Vp, rcond=1e-12) @ FVf, True


def rts_backward(filt_mean, filt_cov, pieces: Callable, project: np.ndarray | None = None):
    """Fixed-interval smoother over stored filter output (time, batch, ...).

    The predicted moments are recomputed from the filtered ones so only the
    filter output needs to be kept.  With ``project`` (c, k) only the projected
    means and variances (time, batch, c) are returned, which keeps memory at
    O(batch * k^2) during the pass.

    Returns (means, covs_or_vars, used_pinv).
    """
    N, B, k = filt_mean.shape
    xs = filt_mean[-1].copy()
    Vs = filt_cov[-1].copy()
    if project is None:
        out_m = np.empty_like(filt_mean)
        out_v = np.empty_like(filt_cov)
    else:
        c = project.shape[0]
        out_m = np.empty((N, B, c))
        out_v = np.empty((N, B, c))

    def emit(i, m, V):
        if project is None:
            out_m[i] = m
            out_v[i] = V
        else:
            out_m[i] = m @ project.T
            out_v[i] = np.einsum("ck,bkl,cl->bc", project, V, project)

    emit(N - 1, xs, Vs)
    used_pinv = False
    for i in range(N - 2, -1, -1):
        F, G, H, Q, R = pieces(i + 1)
        xf, Vf = filt_mean[i], filt_cov[i]
        xp, Vp = batch_predict(xf, Vf, F, G, Q)
        At, flag = _solve_gain(Vp, F @ Vf)
        used_pinv |= flag
        A = _T(At)
        xs = xf + np.einsum("bij,bj->bi", A, xs - xp)
        Vs = Vf + A @ (Vs - Vp) @ At
        Vs += _T(Vs)
        Vs *= 0.5
        emit(i, xs, Vs)
    return out_m, out_v, used_pinv


# ---------------------------------------------------------------------------
# Single-model API
# ---------------------------------------------------------------------------


@dataclass
class KalmanRun:
    """Predicted and filtered moments, innovations and log-likelihood.

    Array index ``i`` corresponds to time ``n = i + 1``.
    """

    model: LinearGaussianSSM
    ys: TimeSeries
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    resid: np.ndarray
    rvar: np.ndarray
    loglik: float

    @property
    def n(self) -> int:
        return self.filt_mean.shape[0]

    def predicted(self, n: int) -> GaussianBelief:
        return GaussianBelief(self.pred_mean[n - 1], self.pred_cov[n - 1], n, "predicted")

    def filtered(self, n: int) -> GaussianBelief:
        return GaussianBelief(self.filt_mean[n - 1], self.filt_cov[n - 1], n, "filtered")

    @property
    def innovations(self):
        return self.resid, self.rvar


@dataclass
class SmoothedRun:
    mean: np.ndarray
    cov: np.ndarray
    used_pinv: bool = False

    def smoothed(self, n: int) -> GaussianBelief:
        return GaussianBelief(self.mean[n - 1], self.cov[n - 1], n, "smoothed")


def kf_predict(belief: GaussianBelief, model: LinearGaussianSSM, n: int) -> GaussianBelief:
    if belief.tag != "filtered":
        raise ValueError("prediction expects a filtered belief")
    F, G, H, Q, R = model.matrices(n)
    if F.shape[1] != belief.dim:
        raise ValueError(f"F has {F.shape[1]} columns but belief has dimension {belief.dim}")
    m, c = batch_predict(belief.mean[None], belief.cov[None], F, G, Q[None])
    return GaussianBelief(m[0], c[0], n, "predicted")


def kf_update(belief: GaussianBelief, y: float, model: LinearGaussianSSM, n: int,
              joseph: bool = False):
    """Returns (filtered belief, residual, r_n); residual and r_n are None when y is missing."""
    if belief.tag != "predicted":
        raise ValueError("update expects a predicted belief")
    if y is None or math.isnan(y):
        return GaussianBelief(belief.mean, belief.cov, n, "filtered"), None, None
    F, G, H, Q, R = model.matrices(n)
    m, c, e, r = batch_update(belief.mean[None], belief.cov[None], float(y), H,
                              np.array([R]), joseph=joseph)
    if r[0] <= 0:
        raise FloatingPointError(f"nonpositive innovation variance at n={n}")
    return GaussianBelief(m[0], c[0], n, "filtered"), float(e[0]), float(r[0])


def kf_filter(model: LinearGaussianSSM, ys, joseph: bool = False) -> KalmanRun:
    ys = as_series(ys)
    run = batch_filter(ys.values, model.x0.mean, model.x0.cov, model.pieces, 1, joseph=joseph)
    # Sequential accumulation keeps the sum order identical to the particle code.
    ll = 0.0
    for inc in run.increments[:, 0]:
        ll += float(inc)
    return KalmanRun(model, ys, run.pred_mean[:, 0], run.pred_cov[:, 0], run.filt_mean[:, 0],
                     run.filt_cov[:, 0], run.resid[:, 0], run.rvar[:, 0], ll)


def ks_smooth(run: KalmanRun, model: LinearGaussianSSM | None = None) -> SmoothedRun:
    model = model or run.model
    m, V, flag = rts_backward(run.filt_mean[:, None], run.filt_cov[:, None], model.pieces)
    if flag:
        warnings.warn("singular predicted covariance; smoother used a pseudo-inverse", stacklevel=2)
    return SmoothedRun(m[:, 0], V[:, 0], flag)


def loglik(model: LinearGaussianSSM, ys) -> float:
    return kf_filter(model, ys).loglik


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------


@dataclass
class MLEResult:
    params: ParamVector
    loglik: float
    iterations: int
    evaluations: int
    hit_cap: bool
    clamped: np.ndarray


def mle_fit(family: Callable[[np.ndarray], LinearGaussianSSM], ys, init: ParamVector,
            bounds=None, maxiter: int = 2000, polish_steps=(0.05, 0.01, 1e-3, 1e-4, 1e-5)) -> MLEResult:
    """Maximise the Kalman log-likelihood over log10-variance coordinates.

    Nelder-Mead inside the bounds box, then a coordinate-wise refinement over
    shrinking step sizes.  The returned log-likelihood is never below the
    value at ``init``.
    """
    ys = as_series(ys)
    bounds = np.asarray(init.bounds if bounds is None else bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    nev = 0

    def ll(theta):
        nonlocal nev
        nev += 1
        theta = np.clip(theta, lo, hi)
        try:
            v = kf_filter(family(theta), ys).loglik
        except (FloatingPointError, ValueError, np.linalg.LinAlgError):
            return -np.inf
        return v if np.isfinite(v) else -np.inf

    x0 = np.clip(init.coords, lo, hi)
    f0 = ll(x0)
    if not np.isfinite(f0):
        raise ValueError("log-likelihood is not finite at the initial parameters")

    res = optimize.minimize(lambda t: -ll(t), x0, method="Nelder-Mead", bounds=list(map(tuple, bounds)),
                            options={"maxiter": maxiter, "xatol": 1e-7, "fatol": 1e-10,
                                     "adaptive": x0.size > 2})
    hit_cap = not res.success and res.nit >= maxiter
    best_x, best_f = x0, f0
    if np.isfinite(res.fun) and -res.fun > best_f:
        best_x, best_f = np.clip(res.x, lo, hi), -res.fun

    for step in polish_steps:
        improved = True
        while improved:
            improved = False
            for j in range(best_x.size):
                for sgn in (1.0, -1.0):
                    cand = best_x.copy()
                    cand[j] = np.clip(cand[j] + sgn * step, lo[j], hi[j])
                    fc = ll(cand)
                    if fc > best_f:
                        best_x, best_f, improved = cand, fc, True
    if hit_cap:
        warnings.warn("Nelder-Mead hit its iteration cap; returning best point found", stacklevel=2)
    params = ParamVector(best_x, init.names, bounds)
    clamped = np.isclose(best_x, lo) | np.isclose(best_x, hi)
    return MLEResult(params, float(best_f), int(res.nit), nev, bool(hit_cap), clamped)
