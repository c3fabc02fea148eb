"""Numerical-integration (grid) filter and smoother for low-dimensional states.

Densities live on uniform tensor-product grids and are integrated with the
trapezoid rule.  Transition kernels are discretized so that every source node
sends unit trapezoid mass to the grid (column normalization); this keeps
narrow kernels, whose width is below the node spacing, from creating or
destroying probability.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .core import RunSummary, as_series, summarize_bands
from .kalman import LinearGaussianSSM
from .models import AugmentedSSM, PointMass, UniformBox

DEFAULT_NODE_CAP = 2**22
PRED_FLOOR = 1e-300
PRED_RELATIVE_CUTOFF = 1e-12


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size == 1:
        return np.ones(1)
    h = nodes[1] - nodes[0]
    w = np.full(nodes.size, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass
class DensityGrid:
    """Nonnegative density values on a tensor product of uniform axes."""

    axes: tuple
    density: np.ndarray

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.density = np.asarray(self.density, dtype=float)
        shape = tuple(a.size for a in self.axes)
        if self.density.shape != shape:
            raise ValueError(f"density shape {self.density.shape} does not match axes {shape}")
        if np.any(self.density < 0):
            raise ValueError("density must be nonnegative")

    @property
    def shape(self):
        return self.density.shape

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def size(self):
        return self.density.size

    @property
    def weights(self) -> np.ndarray:
        w = np.ones(())
        for a in self.axes:
            w = np.multiply.outer(w, trapezoid_weights(a))
        return w

    @property
    def norm(self) -> float:
        return float(np.sum(self.density * self.weights))

    def normalize(self) -> "DensityGrid":
        z = self.norm
        if not z > 0:
            raise FloatingPointError("density integrates to zero on the grid")
        return DensityGrid(self.axes, self.density / z)

    def masses(self) -> np.ndarray:
        m = self.density * self.weights
        return m / m.sum()


def grid_build(bounds, nodes, cap: int = DEFAULT_NODE_CAP) -> DensityGrid:
    """Uniform normalized density on equally spaced nodes including the bounds."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    nodes = np.broadcast_to(np.asarray(nodes, dtype=int), (bounds.shape[0],))
    if np.any(nodes < 3):
        raise ValueError("each axis needs at least 3 nodes")
    total = int(np.prod(nodes.astype(float)))
    if total > cap:
        raise MemoryError(f"grid of {total} nodes exceeds the cap of {cap}")
    axes = tuple(np.linspace(lo, hi, k) for (lo, hi), k in zip(bounds, nodes))
    return DensityGrid(axes, np.ones(tuple(nodes))).normalize()


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


class _AxisConvolver:
    """Gaussian kernel on one uniform axis, one sd per column.

    ``forward`` computes  out[j] = sum_i K(j|i) p[i] w[i]  and ``adjoint``
    out[i] = sum_j K(j|i) r[j] w[j], with K column-normalized so that
    sum_j K(j|i) w[j] = 1.  Arrays carry the axis first and the column index
    second; extra trailing axes are broadcast.
    """

    def __init__(self, nodes, sds):
        nodes = np.asarray(nodes, dtype=float)
        self.k = k = nodes.size
        self.w = trapezoid_weights(nodes)
        sds = np.atleast_1d(np.asarray(sds, dtype=float))
        self.B = sds.size
        self.identity = bool(k == 1 or np.all(sds == 0))
        if self.identity:
            return
        h = nodes[1] - nodes[0]
        d = np.arange(-(k - 1), k) * h
        g = np.zeros((sds.size, 2 * k - 1))
        for b, s in enumerate(sds):
            if s > 0:
                g[b] = np.exp(-0.5 * (d / s) ** 2) / s
            else:
                g[b, k - 1] = 1.0
        # colnorm[b, i] = sum_j g[b, j - i + k - 1] w[j]
        self.L = sfft.next_fast_len(3 * k - 2, real=True)
        self.gf = sfft.rfft(g, self.L, axis=1).T  # (L//2+1, B)
        self.colnorm = self._conv(np.broadcast_to(self.w[:, None], (k, self.B))).copy()

    def _conv(self, u):
        extra = (1,) * (u.ndim - 2)
        U = sfft.rfft(u, self.L, axis=0)
        out = sfft.irfft(U * self.gf.reshape(self.gf.shape + extra), self.L, axis=0)
        return out[self.k - 1: 2 * self.k - 1]

    def _shape(self, a):
        return a.reshape(a.shape + (1,) * (self._ndim - 2))

    def forward(self, p, clip: bool = True):
        if self.identity:
            return p
        self._ndim = p.ndim
        w = self.w.reshape((-1,) + (1,) * (p.ndim - 1))
        u = p * w / self._shape(self.colnorm)
        out = self._conv(u)
        return np.maximum(out, 0.0) if clip else out

    def adjoint(self, r):
        if self.identity:
            return r
        self._ndim = r.ndim
        w = self.w.reshape((-1,) + (1,) * (r.ndim - 1))
        return np.maximum(self._conv(r * w), 0.0) / self._shape(self.colnorm)


def _along(axis, fn, a):
    """Apply ``fn`` (axis-first, one column) along ``axis`` of ``a``."""
    moved = np.moveaxis(a, axis, 0)
    shp = moved.shape
    out = fn(moved.reshape(shp[0], 1, -1))
    return np.moveaxis(out.reshape(shp), 0, axis)


class GaussianWalkKernel:
    """Independent Gaussian random walk on every axis; sd 0 leaves an axis fixed."""

    def __init__(self, axes, sds):
        sds = np.broadcast_to(np.asarray(sds, dtype=float), (len(axes),))
        self.axes = tuple(axes)
        self.convs = [_AxisConvolver(a, s) for a, s in zip(axes, sds)]

    def forward(self, p, clip: bool = True):
        """Push ``p`` through the kernel; ``clip=False`` keeps signed inputs signed."""
        for ax, c in enumerate(self.convs):
            if not c.identity:
                p = _along(ax, lambda a: c.forward(a, clip), p)
        return p

    def adjoint(self, r):
        for ax, c in reversed(list(enumerate(self.convs))):
            if not c.identity:
                r = _along(ax, c.adjoint, r)
        return r


class AugmentedTrendKernel:
    """Transition for z = (t, theta): theta random walk, then t_n ~ N(t_{n-1}, 10**theta_var).

    Axis 0 is the trend level; axes 1.. are parameters.  ``var_axis`` names the
    parameter axis holding log10 of the level variance; with ``var_axis=None``
    the level variance is the constant ``level_var``.
    """

    def __init__(self, axes, walk_sd, var_axis: int | None = 1, level_var: float | None = None):
        self.ndim = len(axes)
        self.walk = [None] + [_AxisConvolver(a, s) for a, s in
                              zip(axes[1:], np.broadcast_to(walk_sd, (self.ndim - 1,)))]
        self.var_axis = var_axis
        if var_axis is None:
            self.level = _AxisConvolver(axes[0], [math.sqrt(level_var)])
        else:
            self.level = _AxisConvolver(axes[0], np.sqrt(np.power(10.0, axes[var_axis])))

    def _level(self, fn, a):
        if self.var_axis is None:
            shp = a.shape
            return fn(a.reshape(shp[0], 1, -1)).reshape(shp)
        moved = np.moveaxis(a, self.var_axis, 1)
        shp = moved.shape
        out = fn(moved.reshape(shp[0], shp[1], -1)).reshape(shp)
        return np.moveaxis(out, 1, self.var_axis)

    def forward(self, p):
        for ax in range(1, self.ndim):
            if not self.walk[ax].identity:
                p = _along(ax, self.walk[ax].forward, p)
        return self._level(self.level.forward, p)

    def adjoint(self, r):
        r = self._level(self.level.adjoint, r)
        for ax in range(self.ndim - 1, 0, -1):
            if not self.walk[ax].identity:
                r = _along(ax, self.walk[ax].adjoint, r)
        return r


class DenseKernel:
    """Arbitrary kernel ``fn(z_to, z_from)`` tabulated on a small grid."""

    def __init__(self, grid: DensityGrid, fn):
        pts = np.stack(np.meshgrid(*grid.axes, indexing="ij"), axis=-1).reshape(-1, grid.ndim)
        K = np.asarray(fn(pts[:, None, :], pts[None, :, :]), dtype=float)
        if not np.all(np.isfinite(K)):
            raise FloatingPointError("kernel evaluates to non-finite values")
        W = grid.weights.reshape(-1)
        self.shape = grid.shape
        self.W = W
        self.K = K / (W @ K)[None, :]

    def forward(self, p):
        return (self.K @ (p.reshape(-1) * self.W)).reshape(self.shape)

    def adjoint(self, r):
        return (self.K.T @ (r.reshape(-1) * self.W)).reshape(self.shape)


# ---------------------------------------------------------------------------
# Recursions
# ---------------------------------------------------------------------------


def ngf_predict(grid: DensityGrid, kernel) -> DensityGrid:
    out = kernel.forward(grid.density)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("kernel produced non-finite density")
    return DensityGrid(grid.axes, out).normalize()


def ngf_update(grid: DensityGrid, likelihood, log: bool = False):
    """Bayes update; returns (posterior grid, log of the normalizing integral)."""
    ll = np.asarray(likelihood, dtype=float)
    if not log:
        with np.errstate(divide="ignore"):
            ll = np.log(ll)
    ll = np.broadcast_to(ll, grid.shape)
    mx = np.max(ll)
    if not np.isfinite(mx):
        raise FloatingPointError("likelihood is zero everywhere on the grid; widen the bounds")
    prod = grid.density * np.exp(ll - mx)
    z = float(np.sum(prod * grid.weights))
    if not z > 0:
        raise FloatingPointError("likelihood is zero wherever the prior has mass; widen the bounds")
    return DensityGrid(grid.axes, prod / z), mx + math.log(z)


@dataclass
class NGFRun:
    axes: tuple
    filtered: np.ndarray  # (N, *grid shape)
    increments: np.ndarray
    loglik: float


def ngf_filter(prior: DensityGrid, kernel, loglik_fn, ys) -> NGFRun:
    """Forward pass.  ``loglik_fn(y, i)`` returns log p(y | z) on the grid nodes."""
    ys = as_series(ys).values
    g = prior.normalize()
    filt = np.empty((ys.size,) + g.shape)
    inc = np.zeros(ys.size)
    for i, y in enumerate(ys):
        g = ngf_predict(g, kernel)
        if not math.isnan(y):
            g, inc[i] = ngf_update(g, loglik_fn(y, i), log=True)
        filt[i] = g.density
    return NGFRun(g.axes, filt, inc, float(inc.sum()))


def ngf_smooth(run: NGFRun, kernel) -> tuple[np.ndarray, int]:
    """Backward density recursion; returns (smoothed densities, underflow count)."""
    N = run.filtered.shape[0]
    W = DensityGrid(run.axes, run.filtered[-1]).weights
    sm = np.empty_like(run.filtered)
    sm[-1] = run.filtered[-1]
    underflow = 0
    for i in range(N - 2, -1, -1):
        pred = ngf_predict(DensityGrid(run.axes, run.filtered[i]), kernel).density
        small = pred < PRED_RELATIVE_CUTOFF * pred.max()
        underflow += int(np.count_nonzero(small & (sm[i + 1] > 0)))
        ratio = sm[i + 1] / np.maximum(pred, PRED_FLOOR)
        ratio[small] = 0.0
        s = run.filtered[i] * kernel.adjoint(ratio)
        z = np.sum(s * W)
        if not z > 0:
            raise FloatingPointError(f"smoothed density vanished at n={i + 1}")
        sm[i] = s / z
    return sm, underflow


def grid_marginal_stats(grid: DensityGrid, dim: int) -> tuple[float, float]:
    x = grid.axes[dim]
    marg = _marginal(grid.density, grid.axes, dim)
    w = trapezoid_weights(x) * marg
    w = w / w.sum()
    mean = float(np.sum(w * x))
    return mean, float(np.sqrt(max(np.sum(w * (x - mean) ** 2), 0.0)))


def _marginal(density, axes, dim):
    out = density
    for ax in range(len(axes) - 1, -1, -1):
        if ax != dim:
            out = np.tensordot(out, trapezoid_weights(axes[ax]), axes=([ax], [0]))
    return out


def _series_stats(dens, axes, dim):
    """Trapezoid mean/sd of the ``dim`` marginal for a stack of densities (N, ...)."""
    x = axes[dim]
    marg = dens
    for ax in range(len(axes) - 1, -1, -1):
        if ax != dim:
            marg = np.tensordot(marg, trapezoid_weights(axes[ax]), axes=([ax + 1], [0]))
    w = marg * trapezoid_weights(x)
    w /= w.sum(axis=1, keepdims=True)
    mean = w @ x
    var = np.sum(w * (x[None, :] - mean[:, None]) ** 2, axis=1)
    return mean, np.sqrt(np.maximum(var, 0.0))


def dump_marginals_csv(dens, axes, dim, path) -> None:
    """Write per-time marginals as ``n,node,density`` rows."""
    x = axes[dim]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "node", "density"])
        for i in range(dens.shape[0]):
            m = _marginal(dens[i], axes, dim)
            for xv, dv in zip(x, m):
                wr.writerow([i + 1, repr(float(xv)), repr(float(dv))])


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def level_bounds(ys, width: float = 4.0) -> tuple[float, float]:
    """Trend-axis bounds: data range extended by ``width`` sample standard deviations."""
    y = as_series(ys).values
    y = y[~np.isnan(y)]
    sd = float(y.std(ddof=1)) if y.size > 1 else 1.0
    return float(y.min() - width * sd), float(y.max() + width * sd)


def _gauss_on(nodes, mean, var):
    return np.exp(-0.5 * (nodes - mean) ** 2 / var)


def ngf_linear_trend(model: LinearGaussianSSM, ys, nodes: int, bounds=None, smooth: bool = True):
    """Grid filter/smoother for a scalar random-walk model (F=G=H=1).

    Returns (filter mean, filter sd, smoother mean, smoother sd, loglik).
    """
    F, G, H, Q, R = model.matrices(1)
    if F.shape != (1, 1) or not (F[0, 0] == G[0, 0] == H[0] == 1.0):
        raise ValueError("ngf_linear_trend handles the order-1 trend model only")
    ys = as_series(ys)
    lo, hi = bounds if bounds is not None else level_bounds(ys)
    x = np.linspace(lo, hi, nodes)
    prior = DensityGrid((x,), _gauss_on(x, model.x0.mean[0], model.x0.cov[0, 0]))
    kernel = GaussianWalkKernel((x,), [math.sqrt(Q[0, 0])])
    c = -0.5 * math.log(2 * math.pi * R)
    run = ngf_filter(prior, kernel, lambda y, i: c - 0.5 * (y - x) ** 2 / R, ys)
    fm, fs = _series_stats(run.filtered, run.axes, 0)
    if not smooth:
        return fm, fs, None, None, run.loglik
    sm, _ = ngf_smooth(run, kernel)
    smm, sms = _series_stats(sm, run.axes, 0)
    return fm, fs, smm, sms, run.loglik


def sof_ngf_run(aug: AugmentedSSM, ys, level_nodes: int, param_nodes, level_range=None,
                cap: int = DEFAULT_NODE_CAP, smooth: bool = True) -> RunSummary:
    """Self-organizing order-1 trend on a (level x parameters) grid."""
    d = aug.param_dim
    param_nodes = np.broadcast_to(np.asarray(param_nodes, dtype=int), (d,))
    # every state coordinate would need its own axis
    total = float(level_nodes) ** aug.dim_x * float(np.prod(param_nodes.astype(float)))
    if total > cap:
        raise MemoryError(f"grid of {total:.4g} nodes exceeds the cap of {cap}; "
                          f"{aug.dim_x + d}-dimensional grids this large are refused")
    if aug.family.kind != "trend1":
        raise ValueError("the grid filter supports the order-1 trend family only")
    ys = as_series(ys)
    lo, hi = level_range if level_range is not None else level_bounds(ys)
    axes = (np.linspace(lo, hi, level_nodes),) + tuple(
        np.linspace(b0, b1, k) for (b0, b1), k in zip(aug.bounds, param_nodes))
    mesh = np.meshgrid(*axes, indexing="ij")

    x0 = aug.x0
    dens = _gauss_on(mesh[0], x0.mean[0], x0.cov[0, 0])
    if isinstance(aug.prior, PointMass):
        raise ValueError("a point-mass parameter prior cannot be represented on a grid")
    if not isinstance(aug.prior, UniformBox):
        theta = np.stack([m.reshape(-1) for m in mesh[1:]], axis=-1)
        dens = dens * np.exp(aug.prior.logpdf(theta)).reshape(dens.shape)
    prior = DensityGrid(axes, dens)

    names = aug.names
    var_axis = 1 + names.index("tau2") if "tau2" in names else None
    kernel = AugmentedTrendKernel(axes, aug.walk_sd, var_axis,
                                  None if var_axis else aug.family.params["tau2"])
    if "sigma2" in names:
        r = np.power(10.0, mesh[1 + names.index("sigma2")])
    else:
        r = np.full(prior.shape, float(aug.family.params["sigma2"]))
    logc = -0.5 * np.log(2 * np.pi * r)
    level = mesh[0]
    loglik_fn = lambda y, i: logc - 0.5 * (y - level) ** 2 / r

    t0 = time.perf_counter()
    run = ngf_filter(prior, kernel, loglik_fn, ys)
    t1 = time.perf_counter()
    out = RunSummary("NGF", loglik=run.loglik)
    labels = ["trend"] + [f"log10_{nm}" for nm in names]
    for dim, lab in enumerate(labels):
        out.filter[lab] = summarize_bands(*_series_stats(run.filtered, axes, dim))
    out.timings["filter"] = t1 - t0
    if smooth:
        sm, underflow = ngf_smooth(run, kernel)
        out.timings["smoother"] = time.perf_counter() - t1
        for dim, lab in enumerate(labels):
            out.smoother[lab] = summarize_bands(*_series_stats(sm, axes, dim))
        out.info["underflow_cells"] = underflow
        if underflow:
            warnings.warn(f"smoother ratio guard hit {underflow} cells", stacklevel=2)
    out.info.update(level_bounds=(lo, hi), nodes=(level_nodes,) + tuple(int(k) for k in param_nodes))
    return out
