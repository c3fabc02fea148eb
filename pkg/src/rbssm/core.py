"""Shared value types, series ingestion and posterior summaries.

Time indexing follows the usual state-space convention: the initial state
lives at time 0 and observations at times 1..N.  Arrays are stored 0-based,
so element ``i`` of any per-time array refers to time ``i + 1``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TAGS = ("predicted", "filtered", "smoothed")
BAND_MULTIPLIERS = (1, 2, 3)


class ParseError(ValueError):
    """A CSV cell could not be read as a number."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeSeries:
    """Scalar observations y_1..y_N; NaN marks a missing value."""

    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError(f"series must be one-dimensional, got shape {v.shape}")
        if v.size < 1:
            raise ValueError("series must contain at least one value")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())

    def __len__(self) -> int:
        return self.n


def as_series(ys) -> TimeSeries:
    if isinstance(ys, TimeSeries):
        return ys
    return TimeSeries(np.asarray(ys, dtype=float))


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of the state at one time index."""

    mean: np.ndarray
    cov: np.ndarray
    time: int = 0
    tag: str = "filtered"

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ValueError("belief mean must be a vector")
        k = mean.size
        if cov.shape != (k, k):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {k}")
        if self.tag not in TAGS:
            raise ValueError(f"unknown conditioning tag {self.tag!r}")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > 1e-10 * scale:
            raise ValueError("belief covariance is not symmetric")
        tr = float(np.trace(cov))
        if k > 0 and np.linalg.eigvalsh(cov).min() < -1e-10 * max(abs(tr), 1.0):
            raise ValueError("belief covariance is not positive semidefinite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @classmethod
    def diffuse(cls, k: int, var: float = 1e4, mean: float = 0.0) -> "GaussianBelief":
        return cls(np.full(k, float(mean)), np.eye(k) * var, time=0, tag="filtered")


@dataclass(frozen=True)
class PosteriorBands:
    """Posterior mean with +-1, 2, 3 standard-deviation envelopes."""

    mean: np.ndarray
    sd: np.ndarray

    def lower(self, k: int) -> np.ndarray:
        return self.mean - k * self.sd

    def upper(self, k: int) -> np.ndarray:
        return self.mean + k * self.sd

    @property
    def bands(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {k: (self.lower(k), self.upper(k)) for k in BAND_MULTIPLIERS}

    def __len__(self) -> int:
        return int(self.mean.size)


def summarize_bands(means: Sequence[float], sds: Sequence[float]) -> PosteriorBands:
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    if means.shape != sds.shape:
        raise ValueError(f"length mismatch: {means.shape} means vs {sds.shape} sds")
    if np.any(sds < 0):
        raise ValueError(f"negative sd at index {int(np.argmax(sds < 0))}")
    return PosteriorBands(_frozen(means), _frozen(sds))


@dataclass
class ParamVector:
    """Transformed parameters; every coordinate is log10 of a variance."""

    coords: np.ndarray
    names: tuple[str, ...]
    bounds: np.ndarray

    def __post_init__(self):
        self.coords = np.atleast_1d(np.asarray(self.coords, dtype=float)).copy()
        self.names = tuple(self.names)
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float)).copy()
        d = self.coords.size
        if len(self.names) != d or self.bounds.shape != (d, 2):
            raise ValueError("coords, names and bounds must agree in length")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ValueError("each bound needs lo < hi")

    @property
    def dim(self) -> int:
        return int(self.coords.size)

    @property
    def variances(self) -> np.ndarray:
        return np.power(10.0, self.coords)

    def clamped(self) -> tuple["ParamVector", np.ndarray]:
        """Copy clipped into the bounds box, plus a mask of clipped coordinates.

        A warning is emitted whenever anything was clipped.
        """
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        mask = (self.coords < lo) | (self.coords > hi)
        if mask.any():
            names = [nm for nm, hit in zip(self.names, mask) if hit]
            warnings.warn(f"parameters clamped to bounds: {names}", stacklevel=2)
        return ParamVector(np.clip(self.coords, lo, hi), self.names, self.bounds), mask

    def as_dict(self) -> dict[str, float]:
        return {nm: float(c) for nm, c in zip(self.names, self.coords)}


# ---------------------------------------------------------------------------
# CSV ingestion / emission
# ---------------------------------------------------------------------------


def _parse_cell(cell: str) -> float | None:
    cell = cell.strip()
    if cell == "":
        return math.nan
    try:
        return float(cell)
    except ValueError:
        return None


def ingest_csv(path, column: int | str = 0, label: str | None = None) -> TimeSeries:
    """Read one column of a CSV file into a :class:`TimeSeries`.

    A header row is recognised when every cell of the first row is
    non-numeric text.  Empty cells become NaN (missing).
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        # blank lines inside the file are missing values; trailing ones are not data
        while rows and not rows[-1]:
            rows.pop()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no rows")

    first = rows[0]
    has_header = bool(first) and all(c.strip() and _parse_cell(c) is None for c in first)
    if isinstance(column, str) and not column.lstrip("-").isdigit():
        if not has_header:
            raise KeyError(f"{path}: column {column!r} requested but file has no header")
        names = [c.strip() for c in first]
        if column not in names:
            raise KeyError(f"{path}: column {column!r} absent (have {names})")
        col = names.index(column)
    else:
        col = int(column)
    body = rows[1:] if has_header else rows
    offset = 2 if has_header else 1

    values = []
    for i, row in enumerate(body):
        if not row:
            values.append(math.nan)
            continue
        if col >= len(row):
            if len(row) == 1 and col > 0:
                raise KeyError(f"{path}: column {col} absent")
            values.append(math.nan)
            continue
        v = _parse_cell(row[col])
        if v is None:
            raise ParseError(f"{path}: row {i + offset} has non-numeric value {row[col]!r}")
        values.append(v)
    if not values or all(math.isnan(v) for v in values):
        raise ValueError(f"{path}: no parsable rows")
    return TimeSeries(np.array(values), label=label if label is not None else path.stem)


def emit_csv(series: TimeSeries, path, header: str | None = "y") -> None:
    """Write a series one value per row; missing values become empty cells."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([header])
        for v in series.values:
            w.writerow(["" if math.isnan(v) else repr(float(v))])


def emit_bands_csv(bands: PosteriorBands, path) -> None:
    cols = ["n", "mean", "sd", "lo1", "hi1", "lo2", "hi2", "lo3", "hi3"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        lo = {k: bands.lower(k) for k in BAND_MULTIPLIERS}
        hi = {k: bands.upper(k) for k in BAND_MULTIPLIERS}
        for i in range(len(bands)):
            row = [i + 1, bands.mean[i], bands.sd[i]]
            for k in BAND_MULTIPLIERS:
                row += [lo[k][i], hi[k][i]]
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def log_scale(series: TimeSeries, factor: float = 100.0, natural: bool = False) -> TimeSeries:
    """Map each value v to ``factor * log10(v)`` (natural log if asked)."""
    v = series.values
    bad = ~np.isnan(v) & (v <= 0)
    if bad.any():
        raise ValueError(f"nonpositive value at index {int(np.argmax(bad))}")
    with np.errstate(invalid="ignore"):
        out = factor * (np.log(v) if natural else np.log10(v))
    return TimeSeries(out, label=series.label)


# ---------------------------------------------------------------------------
# Posterior summaries produced by every method
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    """Per-coordinate filter/smoother bands, log-likelihood and timings."""

    method: str
    filter: dict[str, PosteriorBands] = field(default_factory=dict)
    smoother: dict[str, PosteriorBands] = field(default_factory=dict)
    loglik: float = math.nan
    timings: dict[str, float] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def write(self, outdir, stages: Iterable[str] = ("filter", "smoother")) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        for stage in stages:
            for name, bands in getattr(self, stage).items():
                p = outdir / f"{stage}_{name}.csv"
                emit_bands_csv(bands, p)
                written.append(p)
        return written


def weighted_mean_sd(values: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sd over axis 0 of ``values`` under normalized ``weights``."""
    w = weights.reshape((-1,) + (1,) * (values.ndim - 1))
    mean = np.sum(w * values, axis=0)
    var = np.sum(w * (values - mean) ** 2, axis=0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def normalize_logweights(logw: np.ndarray) -> np.ndarray:
    lw = np.asarray(logw, dtype=float)
    mx = np.max(lw)
    if not np.isfinite(mx):
        raise FloatingPointError("all weights are zero or non-finite")
    w = np.exp(lw - mx)
    return w / w.sum()
