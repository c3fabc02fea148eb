"""Model builders: trend, seasonal adjustment, self-organizing augmentation.

Variance parameters enter the self-organizing models as log10(variance).
The builders are pure functions of the parameters, so the same code path
produces both a single :class:`~rbssm.kalman.LinearGaussianSSM` and the
batched theta-conditional matrices used by the Rao-Blackwellized filters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianBelief, ParamVector, TimeSeries
from .kalman import LinearGaussianSSM

VARIANCE_NAMES = {
    "trend1": ("tau2", "sigma2"),
    "trend2": ("tau2", "sigma2"),
    "seasonal": ("tau1_2", "tau2_2", "sigma2"),
}

DEFAULT_BOUNDS = {
    "trend1": {"tau2": (-2.5, 1.0), "sigma2": (0.0, 1.0)},
    "trend2": {"tau2": (-2.5, 1.0), "sigma2": (0.0, 1.0)},
    "seasonal": {"tau1_2": (-4.0, 0.0), "tau2_2": (-2.0, 1.0), "sigma2": (0.0, 2.0)},
}

DEFAULT_WALK_SD = 0.04
DIFFUSE_VAR = 1e4


def _structure(kind: str, period: int = 12):
    """(F, G, H, components) for a model kind; components map name -> selector row."""
    if kind == "trend1":
        F = np.array([[1.0]])
        G = np.array([[1.0]])
        H = np.array([1.0])
        comps = {"trend": np.array([1.0])}
    elif kind == "trend2":
        F = np.array([[2.0, -1.0], [1.0, 0.0]])
        G = np.array([[1.0], [0.0]])
        H = np.array([1.0, 0.0])
        comps = {"trend": np.array([1.0, 0.0])}
    elif kind == "seasonal":
        if int(period) != period or period < 2:
            raise ValueError(f"invalid seasonal period {period!r}")
        period = int(period)
        k = period + 1
        F = np.zeros((k, k))
        F[0, 0], F[0, 1], F[1, 0] = 2.0, -1.0, 1.0
        F[2, 2:] = -1.0
        for i in range(3, k):
            F[i, i - 1] = 1.0
        G = np.zeros((k, 2))
        G[0, 0] = 1.0
        G[2, 1] = 1.0
        H = np.zeros(k)
        H[0] = H[2] = 1.0
        e0, e2 = np.zeros(k), np.zeros(k)
        e0[0], e2[2] = 1.0, 1.0
        comps = {"trend": e0, "seasonal": e2}
    else:
        raise ValueError(f"unsupported model kind {kind!r}")
    return F, G, H, comps


def state_dim(kind: str, period: int = 12) -> int:
    return _structure(kind, period)[0].shape[0]


def _batched_noise(kind: str, var: dict[str, np.ndarray]):
    """Q (B,l,l) and R (B,) from per-name variance arrays of length B."""
    if kind == "seasonal":
        t1, t2 = var["tau1_2"], var["tau2_2"]
        Q = np.zeros((t1.size, 2, 2))
        Q[:, 0, 0] = t1
        Q[:, 1, 1] = t2
    else:
        t = var["tau2"]
        Q = np.zeros((t.size, 1, 1))
        Q[:, 0, 0] = t
    return Q, np.array(var["sigma2"], dtype=float)


def _check_variances(params: dict):
    for name, v in params.items():
        if v < 0:
            raise ValueError(f"variance {name} must be nonnegative, got {v}")


def _model(kind, params, period=12, x0=None) -> LinearGaussianSSM:
    _check_variances(params)
    F, G, H, comps = _structure(kind, period)
    var = {nm: np.array([float(params[nm])]) for nm in VARIANCE_NAMES[kind]}
    Q, R = _batched_noise(kind, var)
    if x0 is None:
        x0 = GaussianBelief.diffuse(F.shape[0], DIFFUSE_VAR)
    return LinearGaussianSSM(F, G, H, Q[0], R[0], x0, components=comps)


def trend_model(order: int, tau2: float, sigma2: float, x0: GaussianBelief | None = None) -> LinearGaussianSSM:
    """Random-walk (order 1) or integrated random-walk (order 2) trend plus noise."""
    if order not in (1, 2):
        raise ValueError(f"unsupported trend order {order!r}")
    return _model(f"trend{order}", {"tau2": tau2, "sigma2": sigma2}, x0=x0)


def seasonal_model(period: int = 12, tau1_2: float = 0.0, tau2_2: float = 0.0, sigma2: float = 1.0,
                   x0: GaussianBelief | None = None) -> LinearGaussianSSM:
    """Order-2 trend plus dummy seasonal of the given period.

    State is (T_n, T_{n-1}, S_n, ..., S_{n-period+2}); dimension period + 1.
    """
    return _model("seasonal", {"tau1_2": tau1_2, "tau2_2": tau2_2, "sigma2": sigma2}, period, x0)


# ---------------------------------------------------------------------------
# Parameter priors
# ---------------------------------------------------------------------------


class UniformBox:
    def __init__(self, bounds):
        self.bounds = np.atleast_2d(np.asarray(bounds, dtype=float))

    @property
    def dim(self):
        return self.bounds.shape[0]

    def sample(self, rng, m):
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (hi - lo) * rng.random((m, self.dim))

    def logpdf(self, theta):
        theta = np.atleast_2d(theta)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        inside = np.all((theta >= lo) & (theta <= hi), axis=-1)
        return np.where(inside, -np.sum(np.log(hi - lo)), -np.inf)


class PointMass:
    def __init__(self, theta):
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))

    @property
    def dim(self):
        return self.theta.size

    def sample(self, rng, m):
        return np.tile(self.theta, (m, 1))

    def logpdf(self, theta):
        theta = np.atleast_2d(theta)
        return np.where(np.all(theta == self.theta, axis=-1), 0.0, -np.inf)


class GaussianPrior:
    def __init__(self, mean, sd):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), self.mean.shape).copy()

    @property
    def dim(self):
        return self.mean.size

    def sample(self, rng, m):
        return self.mean + self.sd * rng.standard_normal((m, self.dim))

    def logpdf(self, theta):
        z = (np.atleast_2d(theta) - self.mean) / self.sd
        return -0.5 * np.sum(z * z + np.log(2 * np.pi * self.sd**2), axis=-1)


# ---------------------------------------------------------------------------
# Self-organizing (augmented) models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelFamily:
    """A structural model kind with reference variances for every noise term."""

    kind: str
    params: dict
    period: int = 12
    x0: GaussianBelief | None = None

    def __post_init__(self):
        missing = set(VARIANCE_NAMES[self.kind]) - set(self.params)
        if missing:
            raise ValueError(f"{self.kind} needs variances {sorted(missing)}")
        _check_variances(self.params)

    @property
    def dim_x(self) -> int:
        return state_dim(self.kind, self.period)

    @property
    def initial(self) -> GaussianBelief:
        return self.x0 if self.x0 is not None else GaussianBelief.diffuse(self.dim_x, DIFFUSE_VAR)

    @property
    def components(self) -> dict[str, np.ndarray]:
        return _structure(self.kind, self.period)[3]

    def model(self, **override) -> LinearGaussianSSM:
        return _model(self.kind, {**self.params, **override}, self.period, self.initial)


@dataclass(frozen=True)
class AugmentedSSM:
    """State z = (x, theta) with theta = log10 of selected variances on a random walk."""

    family: ModelFamily
    names: tuple
    walk_sd: np.ndarray
    prior: object
    bounds: np.ndarray

    @property
    def param_dim(self) -> int:
        return len(self.names)

    @property
    def dim_x(self) -> int:
        return self.family.dim_x

    @property
    def dim_z(self) -> int:
        return self.dim_x + self.param_dim

    @property
    def x0(self) -> GaussianBelief:
        return self.family.initial

    @property
    def components(self):
        return self.family.components

    def variances(self, theta) -> dict[str, np.ndarray]:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        B = theta.shape[0]
        out = {nm: np.full(B, float(self.family.params[nm])) for nm in VARIANCE_NAMES[self.family.kind]}
        for j, nm in enumerate(self.names):
            out[nm] = np.power(10.0, theta[:, j])
        return out

    def conditional(self, theta):
        """Batched (F, G, H, Q, R) for parameter rows ``theta`` (B, d)."""
        F, G, H, _ = _structure(self.family.kind, self.family.period)
        Q, R = _batched_noise(self.family.kind, self.variances(theta))
        return F, G, H, Q, R

    def base(self, theta) -> LinearGaussianSSM:
        """The linear-Gaussian model at a fixed parameter value."""
        F, G, H, Q, R = self.conditional(np.atleast_1d(theta)[None])
        return LinearGaussianSSM(F, G, H, Q[0], R[0], self.x0, components=self.components)

    def param_vector(self, theta) -> ParamVector:
        return ParamVector(theta, tuple(f"log10_{nm}" for nm in self.names), self.bounds)


def augment(family: ModelFamily, names, walk_sd=DEFAULT_WALK_SD, prior=None, bounds=None) -> AugmentedSSM:
    """Promote the named variances of ``family`` to random-walk log10 parameters."""
    names = tuple(names)
    if not names:
        raise ValueError("augmentation needs at least one parameter")
    unknown = set(names) - set(VARIANCE_NAMES[family.kind])
    if unknown:
        raise ValueError(f"{family.kind} has no variance named {sorted(unknown)}")
    if bounds is None:
        bounds = [DEFAULT_BOUNDS[family.kind][nm] for nm in names]
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    if bounds.shape != (len(names), 2) or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds must be (lo, hi) pairs with lo < hi, one per parameter")
    walk_sd = np.broadcast_to(np.asarray(walk_sd, dtype=float), (len(names),)).copy()
    if np.any(walk_sd < 0):
        raise ValueError("walk_sd must be nonnegative")
    if prior is None:
        prior = UniformBox(bounds)
    if prior.dim != len(names):
        raise ValueError("prior dimension does not match the parameter list")
    walk_sd.setflags(write=False)
    bounds.setflags(write=False)
    return AugmentedSSM(family, names, walk_sd, prior, bounds)


@dataclass(frozen=True)
class PartialLinearSSM:
    """Augmented model viewed as linear-Gaussian in x given the theta path."""

    aug: AugmentedSSM

    @property
    def param_dim(self):
        return self.aug.param_dim

    @property
    def dim_x(self):
        return self.aug.dim_x

    @property
    def walk_sd(self):
        return self.aug.walk_sd

    @property
    def prior(self):
        return self.aug.prior

    @property
    def names(self):
        return self.aug.names

    @property
    def x0(self):
        return self.aug.x0

    @property
    def components(self):
        return self.aug.components

    def conditional(self, theta):
        return self.aug.conditional(theta)

    def model_at(self, theta) -> LinearGaussianSSM:
        return self.aug.base(theta)

    def theta_step(self, theta, rng):
        """theta_n = theta_{n-1} + u_n, u_n ~ N(0, diag(walk_sd^2))."""
        if not np.any(self.walk_sd):
            return theta
        return theta + self.walk_sd * rng.standard_normal(theta.shape)

    def path_pieces(self, paths):
        """pieces(i) for a batch of theta paths of shape (B, N, d)."""
        return lambda i: self.conditional(paths[:, i, :])


def split_partial_linear(aug: AugmentedSSM) -> PartialLinearSSM:
    return PartialLinearSSM(aug)


class FixedSplit:
    """A time-invariant linear-Gaussian model seen as partially linear.

    The parameter is a dummy static scalar with a point-mass prior, so the
    Rao-Blackwellized filters reduce to the Kalman recursions on ``model``.
    Components default to every state coordinate.
    """

    param_dim = 1
    names = ("dummy",)

    def __init__(self, model: LinearGaussianSSM):
        self.model = model
        self.walk_sd = np.zeros(1)
        self.prior = PointMass([0.0])
        self.components = dict(model.components) or {
            f"x{j}": np.eye(model.dim_x)[j] for j in range(model.dim_x)}

    @property
    def dim_x(self):
        return self.model.dim_x

    @property
    def x0(self):
        return self.model.x0

    def conditional(self, theta):
        B = np.atleast_2d(theta).shape[0]
        F, G, H, Q, R = self.model.matrices(1)
        return F, G, H, np.repeat(Q[None], B, axis=0), np.full(B, R)

    def model_at(self, theta):
        return self.model

    def theta_step(self, theta, rng):
        return theta

    def path_pieces(self, paths):
        return lambda i: self.conditional(paths[:, i, :])


# ---------------------------------------------------------------------------
# Priors centred on data, simulation, config parsing
# ---------------------------------------------------------------------------


def data_prior(kind: str, ys, period: int = 12, var: float | None = None) -> GaussianBelief:
    """Initial belief centred on the first observations.

    The trend coordinates start at the mean of the first season (or first
    few points); seasonal coordinates start at zero.  The variance defaults to
    the sample variance of that window (at least 1).
    """
    y = np.asarray(ys.values if isinstance(ys, TimeSeries) else ys, dtype=float)
    win = y[: max(period if kind == "seasonal" else 5, 1)]
    win = win[~np.isnan(win)]
    level = float(win.mean()) if win.size else 0.0
    if var is None:
        var = max(float(win.var()) if win.size > 1 else 1.0, 1.0)
    k = state_dim(kind, period)
    mean = np.zeros(k)
    mean[0] = level
    if kind in ("trend2", "seasonal"):
        mean[1] = level
    return GaussianBelief(mean, np.eye(k) * var)


def simulate(model: LinearGaussianSSM, n: int, seed: int, x_init=None):
    """Draw (ys, states) from a linear-Gaussian model.

    ``x_init`` fixes x_0; otherwise it is drawn from ``model.x0``.
    """
    rng = np.random.default_rng(seed)
    k = model.dim_x
    if x_init is None:
        w, V = np.linalg.eigh(model.x0.cov)
        x = model.x0.mean + V @ (np.sqrt(np.maximum(w, 0.0)) * rng.standard_normal(k))
    else:
        x = np.asarray(x_init, dtype=float).copy()
    states = np.empty((n, k))
    ys = np.empty(n)
    for t in range(n):
        F, G, H, Q, R = model.matrices(t + 1)
        ell = G.shape[1]
        w, V = np.linalg.eigh(Q)
        v = V @ (np.sqrt(np.maximum(w, 0.0)) * rng.standard_normal(ell))
        x = F @ x + G @ v
        states[t] = x
        ys[t] = H @ x + np.sqrt(R) * rng.standard_normal()
    return TimeSeries(ys, label="synthetic"), states


def seasonal_start(period: int, level: float, slope: float, amplitude: float, seed: int) -> np.ndarray:
    """A seasonal-model state with a zero-sum seasonal pattern."""
    rng = np.random.default_rng(seed)
    pattern = rng.standard_normal(period)
    pattern = amplitude * (pattern - pattern.mean()) / max(pattern.std(), 1e-12)
    x = np.zeros(period + 1)
    x[0], x[1] = level, level - slope
    # (S_n, ..., S_{n-period+2}) are the last period-1 values of the pattern
    x[2:] = pattern[::-1][: period - 1]
    return x


@dataclass
class ModelConfig:
    family: ModelFamily
    aug: AugmentedSSM | None = None
    raw: dict = field(default_factory=dict)


_MODEL_KEYS = {"model", "period", "params", "selforg", "x0"}
_SELFORG_KEYS = {"names", "walk_sd", "bounds", "prior"}


def from_config(cfg: dict, ys=None) -> ModelConfig:
    """Parse the JSON model schema.

    ``{"model": "trend1|trend2|seasonal", "period": 12, "params": {...},
    "x0": {"mean": [...], "var": v} | "data", "selforg": {"names": [...],
    "walk_sd": [...], "bounds": [...]}}``
    """
    unknown = set(cfg) - _MODEL_KEYS
    if unknown:
        raise KeyError(f"unknown model config key(s): {sorted(unknown)}")
    kind = cfg.get("model", "trend1")
    if kind not in VARIANCE_NAMES:
        raise ValueError(f"unsupported model kind {kind!r}")
    period = int(cfg.get("period", 12))
    params = dict(cfg.get("params", {}))
    bad = set(params) - set(VARIANCE_NAMES[kind])
    if bad:
        raise KeyError(f"unknown parameter(s) for {kind}: {sorted(bad)}")
    for nm in VARIANCE_NAMES[kind]:
        params.setdefault(nm, 1.0)
    x0cfg = cfg.get("x0")
    k = state_dim(kind, period)
    if x0cfg is None:
        x0 = None
    elif x0cfg == "data":
        if ys is None:
            raise ValueError("x0='data' needs the observations")
        x0 = data_prior(kind, ys, period)
    else:
        mean = np.broadcast_to(np.asarray(x0cfg.get("mean", 0.0), dtype=float), (k,))
        var = np.broadcast_to(np.asarray(x0cfg.get("var", DIFFUSE_VAR), dtype=float), (k,))
        x0 = GaussianBelief(mean, np.diag(var))
    family = ModelFamily(kind, params, period, x0)
    aug = None
    so = cfg.get("selforg")
    if so is not None:
        unknown = set(so) - _SELFORG_KEYS
        if unknown:
            raise KeyError(f"unknown selforg key(s): {sorted(unknown)}")
        names = so.get("names", list(VARIANCE_NAMES[kind]))
        prior = None
        if so.get("prior"):
            p = dict(so["prior"])
            kinds = {"point": {"theta"}, "gaussian": {"mean", "sd"}, "uniform": set()}
            ptype = p.pop("type", None)
            if ptype not in kinds:
                raise ValueError(f"selforg prior type must be one of {sorted(kinds)}, got {ptype!r}")
            if set(p) != kinds[ptype]:
                raise KeyError(f"{ptype} prior takes key(s) {sorted(kinds[ptype])}, got {sorted(p)}")
            if ptype == "point":
                prior = PointMass(p["theta"])
            elif ptype == "gaussian":
                prior = GaussianPrior(p["mean"], p["sd"])
        aug = augment(family, names, so.get("walk_sd", DEFAULT_WALK_SD), prior, so.get("bounds"))
    return ModelConfig(family, aug, dict(cfg))
