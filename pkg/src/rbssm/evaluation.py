"""Truth references, error metrics, replication and benchmark tables.

Every method is reached through :func:`run_method`, which takes a method
name, its knobs and a seed and returns a :class:`~rbssm.core.RunSummary`.
Errors are measured against a :class:`TruthReference` built by averaging
large-sample smoother runs.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import RunSummary, as_series, summarize_bands
from .kalman import kf_filter, ks_smooth
from .models import FixedSplit, ModelConfig, split_partial_linear
from .ngf import ngf_linear_trend, sof_ngf_run
from .particle import LinearPF, ResamplePolicy, pf_filter, pf_fixed_lag_smooth, sof_pf_run
from .rao_blackwell import rbngf_run, rbpf_smooth
from .twostep import twostep_run

METHODS = ("kf", "ngf", "pf", "rbpf", "rbngf", "twostep")
LABELS = {"kf": "KF", "ngf": "NGF", "pf": "PF", "rbpf": "RB-PF", "rbngf": "RB-NGF", "twostep": "2-step"}
STOCHASTIC = frozenset({"pf", "rbpf", "twostep"})

# knobs each method reads; anything else is a configuration error
KNOBS = {
    "kf": set(),
    "ngf": {"nodes", "param_nodes", "bounds"},
    "pf": {"m", "lag", "resample", "ess_threshold"},
    "rbpf": {"m", "lag", "resample", "ess_threshold"},
    "rbngf": {"nodes", "bounds", "merge"},
    "twostep": {"m", "np", "lag", "repeats", "weighted", "resample", "ess_threshold"},
}
REQUIRED = {"ngf": {"nodes"}, "pf": {"m"}, "rbpf": {"m"}, "rbngf": {"nodes"}, "twostep": {"m", "np"}}


def check_knobs(method: str, knobs: dict) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    extra = set(knobs) - KNOBS[method]
    if extra:
        raise KeyError(f"knob(s) {sorted(extra)} do not apply to method {method}")
    missing = REQUIRED.get(method, set()) - set(knobs)
    if missing:
        raise KeyError(f"method {method} needs knob(s) {sorted(missing)}")


def _policy(knobs) -> ResamplePolicy:
    when = "ess" if "ess_threshold" in knobs else "every"
    return ResamplePolicy(when, knobs.get("resample", "stratified"), float(knobs.get("ess_threshold", 0.5)))


def _kf_summary(model, ys) -> RunSummary:
    t0 = time.perf_counter()
    run = kf_filter(model, ys)
    t1 = time.perf_counter()
    sm = ks_smooth(run)
    t2 = time.perf_counter()
    out = RunSummary("KF", loglik=run.loglik, timings={"filter": t1 - t0, "smoother": t2 - t1})
    for name, sel in model.components.items():
        fm = run.filt_mean @ sel
        fs = np.sqrt(np.maximum(np.einsum("i,nij,j->n", sel, run.filt_cov, sel), 0.0))
        out.filter[name] = summarize_bands(fm, fs)
        smm = sm.mean @ sel
        sms = np.sqrt(np.maximum(np.einsum("i,nij,j->n", sel, sm.cov, sel), 0.0))
        out.smoother[name] = summarize_bands(smm, sms)
    return out


def _plain_pf(model, ys, m, lag, seed, policy) -> RunSummary:
    labels = list(model.components)
    P = np.array([model.components[c] for c in labels])
    run = pf_filter(LinearPF(model), ys, m, seed, P, labels, policy)
    out = RunSummary("PF", loglik=run.loglik)
    fm, fs = run.filter_summary()
    t0 = time.perf_counter()
    sm, ss = pf_fixed_lag_smooth(run, lag)
    out.timings = {"filter": run.timings["filter"], "smoother": time.perf_counter() - t0}
    for j, lab in enumerate(labels):
        out.filter[lab] = summarize_bands(fm[:, j], fs[:, j])
        out.smoother[lab] = summarize_bands(sm[:, j], ss[:, j])
    out.info.update(m=m, lag=lag, seed=seed)
    return out


def run_method(method: str, mcfg: ModelConfig, ys, knobs: dict | None = None,
               seed: int | None = None) -> RunSummary:
    """Run one method on one series and return its summary.

    Without a self-organizing block in ``mcfg`` the parameters are held at
    their configured values (the RB methods then reduce to a Kalman filter
    per particle).
    """
    knobs = dict(knobs or {})
    check_knobs(method, knobs)
    if method in STOCHASTIC and seed is None:
        raise ValueError(f"method {method} is stochastic and needs an explicit seed")
    ys = as_series(ys)
    N = ys.n
    aug = mcfg.aug
    lag = int(knobs.get("lag", N))
    if method == "kf":
        return _kf_summary(mcfg.family.model(), ys)
    if method == "ngf":
        if aug is None:
            t0 = time.perf_counter()
            fm, fs, sm, ss, ll = ngf_linear_trend(mcfg.family.model(), ys, int(knobs["nodes"]),
                                                  knobs.get("bounds"))
            out = RunSummary("NGF", loglik=ll, timings={"filter+smoother": time.perf_counter() - t0})
            out.filter["trend"] = summarize_bands(fm, fs)
            out.smoother["trend"] = summarize_bands(sm, ss)
            return out
        return sof_ngf_run(aug, ys, int(knobs["nodes"]), knobs.get("param_nodes", 101), knobs.get("bounds"))
    if method == "pf":
        if aug is None:
            return _plain_pf(mcfg.family.model(), ys, int(knobs["m"]), lag, seed, _policy(knobs))
        return sof_pf_run(aug, ys, int(knobs["m"]), lag, seed, policy=_policy(knobs))
    split = split_partial_linear(aug) if aug is not None else FixedSplit(mcfg.family.model())
    if method == "rbpf":
        return rbpf_smooth(split, ys, int(knobs["m"]), lag, seed, policy=_policy(knobs))
    if method == "rbngf":
        if aug is None:
            raise ValueError("rbngf needs a self-organizing block (a parameter grid)")
        return rbngf_run(split, int(knobs["nodes"]), ys, knobs.get("bounds"),
                         merge=bool(knobs.get("merge", True)))
    if aug is None:
        raise ValueError("twostep needs a self-organizing block")
    res, out = twostep_run(split, ys, int(knobs["m"]), int(knobs["np"]), lag, seed,
                           repeats=int(knobs.get("repeats", 5)),
                           weight_by_likelihood=bool(knobs.get("weighted", False)),
                           policy=_policy(knobs))
    out.info["theta_paths"] = res.theta_paths
    out.info["theta_names"] = list(split.names)
    return out


# ---------------------------------------------------------------------------
# Truth reference and metrics
# ---------------------------------------------------------------------------


@dataclass
class TruthReference:
    """Averaged smoother means used as ground truth (filter means kept too)."""

    trend: np.ndarray
    seasonal: np.ndarray | None = None
    filter_trend: np.ndarray | None = None
    filter_seasonal: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.trend)
        for nm in ("seasonal", "filter_trend", "filter_seasonal"):
            v = getattr(self, nm)
            if v is not None and len(v) != n:
                raise ValueError(f"{nm} has length {len(v)}, trend has {n}")

    def stage(self, stage: str):
        if stage == "smoother":
            return self.trend, self.seasonal
        return self.filter_trend, self.filter_seasonal

    def to_json(self) -> dict:
        conv = lambda v: None if v is None else np.asarray(v).tolist()
        return {"trend": conv(self.trend), "seasonal": conv(self.seasonal),
                "filter_trend": conv(self.filter_trend), "filter_seasonal": conv(self.filter_seasonal),
                "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict) -> "TruthReference":
        conv = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(conv(d["trend"]), conv(d.get("seasonal")), conv(d.get("filter_trend")),
                   conv(d.get("filter_seasonal")), dict(d.get("provenance", {})))


def build_truth(mcfg: ModelConfig, ys, m_large: int = 200_000, reps: int = 10, seeds=None,
                backend: str = "rbpf", lag: int | None = None, knobs: dict | None = None) -> TruthReference:
    """Average the smoothed (and filtered) component means of ``reps`` seeded runs.

    ``backend`` is any method name; deterministic backends are run once.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    ys = as_series(ys)
    seeds = list(range(reps)) if seeds is None else [int(s) for s in seeds]
    if len(seeds) != reps:
        raise ValueError(f"{reps} repetitions need {reps} seeds, got {len(seeds)}")
    kn = dict(knobs or {})
    if backend in ("pf", "rbpf"):
        kn.setdefault("m", m_large)
        kn.setdefault("lag", ys.n if lag is None else lag)
    runs = seeds if backend in STOCHASTIC else seeds[:1]
    acc = {}
    for s in runs:
        out = run_method(backend, mcfg, ys, kn, s if backend in STOCHASTIC else None)
        for stage in ("filter", "smoother"):
            for comp in ("trend", "seasonal"):
                b = getattr(out, stage).get(comp)
                if b is not None:
                    acc.setdefault((stage, comp), []).append(b.mean)
    avg = {key: np.mean(v, axis=0) for key, v in acc.items()}
    prov = {"method": LABELS[backend], "m": kn.get("m"), "repetitions": len(runs), "seeds": list(runs),
            "knobs": kn}
    return TruthReference(avg[("smoother", "trend")], avg.get(("smoother", "seasonal")),
                          avg.get(("filter", "trend")), avg.get(("filter", "seasonal")), prov)


def metric_e1(est, ref) -> float:
    """Sum of squared trend errors."""
    a = np.asarray(est, dtype=float)
    b = np.asarray(ref, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def metric_e2(est_trend, est_seasonal, ref_trend, ref_seasonal) -> float:
    """Trend plus seasonal squared error, divided by 1000."""
    if est_seasonal is None or ref_seasonal is None:
        raise ValueError("the E2 error needs a seasonal component on both sides")
    return (metric_e1(est_trend, ref_trend) + metric_e1(est_seasonal, ref_seasonal)) / 1000.0


def summary_error(out: RunSummary, truth: TruthReference, stage: str = "smoother") -> float:
    """E2 when the truth has a seasonal component, E1 otherwise."""
    bands = getattr(out, stage)
    rt, rs = truth.stage(stage)
    if rt is None or "trend" not in bands:
        return math.nan
    if rs is None:
        return metric_e1(bands["trend"].mean, rt)
    s = bands.get("seasonal")
    return metric_e2(bands["trend"].mean, None if s is None else s.mean, rt, rs)


# ---------------------------------------------------------------------------
# Replication
# ---------------------------------------------------------------------------


@dataclass
class Replicate:
    per_seed: list[dict]
    mean: dict
    sd: dict | None


_FIELDS = ("loglik", "err_filter", "err_smoother", "t_filter_s", "t_smoother_s")


def _one(args):
    method, mcfg, ys, knobs, seed, truth = args
    out = run_method(method, mcfg, ys, knobs, seed)
    t = out.timings
    tf = t.get("filter", t.get("filter+smoother", math.nan))
    ts = t.get("smoother", t.get("filter+smoother", math.nan))
    return {"seed": seed, "loglik": float(out.loglik),
            "err_filter": summary_error(out, truth, "filter") if truth else math.nan,
            "err_smoother": summary_error(out, truth, "smoother") if truth else math.nan,
            "t_filter_s": float(tf), "t_smoother_s": float(ts)}


def worker_cap() -> int:
    """Worker processes allowed by the RBSSM_THREADS environment variable (default 1)."""
    v = os.environ.get("RBSSM_THREADS", "1")
    try:
        return max(1, int(v))
    except ValueError:
        raise ValueError(f"RBSSM_THREADS must be an integer, got {v!r}") from None


def replicate(method: str, mcfg: ModelConfig, ys, knobs: dict, nrep: int, seed_base: int = 0,
              truth: TruthReference | None = None, workers: int | None = None) -> Replicate:
    """Repeat a run over seeds ``seed_base .. seed_base + nrep - 1``.

    Deterministic methods are run once and the row is repeated, so their sd
    is zero.  ``workers`` > 1 runs seeds in separate processes; each run is
    still timed on its own.
    """
    if nrep < 1:
        raise ValueError("nrep must be at least 1")
    seeds = list(range(seed_base, seed_base + nrep))
    ys = as_series(ys)
    if method not in STOCHASTIC:
        row = _one((method, mcfg, ys, knobs, None, truth))
        rows = [dict(row, seed=s) for s in seeds]
    else:
        jobs = [(method, mcfg, ys, knobs, s, truth) for s in seeds]
        w = min(worker_cap() if workers is None else workers, nrep)
        if w > 1:
            with ProcessPoolExecutor(w) as ex:
                rows = list(ex.map(_one, jobs))
        else:
            rows = [_one(j) for j in jobs]
    mean = {f: float(np.mean([r[f] for r in rows])) for f in _FIELDS}
    sd = None if nrep == 1 else {f: float(np.std([r[f] for r in rows], ddof=1)) for f in _FIELDS}
    return Replicate(rows, mean, sd)


# ---------------------------------------------------------------------------
# Benchmark tables
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("method", "knob", "loglik", "err_filter", "err_smoother", "t_filter_s", "t_smoother_s",
                 "nrep", "seed0")
SCATTER_COLUMNS = ("method", "knob", "log10_time", "log10_error")


@dataclass
class BenchRow:
    method: str
    knob: str
    loglik: float
    err_filter: float
    err_smoother: float
    t_filter_s: float
    t_smoother_s: float
    nrep: int
    seed0: int
    error: str | None = None
    per_seed: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.error is None


def _size_knob(method):
    return "nodes" if method in ("ngf", "rbngf") else "m"


def bench_table(suite: list[dict], mcfg: ModelConfig, ys, truth: TruthReference | None,
                workers: int | None = None) -> list[BenchRow]:
    """Run every (method, size) entry of ``suite``.

    Each entry is ``{"method": ..., "sizes": [...], "nrep": 1, "seed0": 0,
    "knobs": {...}}``; ``"sweep"`` names the knob the sizes are written to
    (``nodes`` for grid methods, ``m`` otherwise).  A failing run yields a
    row with NaN values and the error message; the suite continues.
    """
    rows = []
    for entry in suite:
        entry = dict(entry)
        unknown = set(entry) - {"method", "sizes", "nrep", "seed0", "knobs", "sweep"}
        if unknown:
            raise KeyError(f"unknown suite key(s): {sorted(unknown)}")
        method = entry["method"]
        sweep = entry.get("sweep", _size_knob(method))
        nrep = int(entry.get("nrep", 1))
        seed0 = int(entry.get("seed0", 0))
        for size in entry.get("sizes", [None]):
            knobs = dict(entry.get("knobs", {}))
            if size is not None:
                knobs[sweep] = size
            label = "" if size is None else f"{sweep}={size}"
            try:
                rep = replicate(method, mcfg, ys, knobs, nrep, seed0, truth, workers)
                m = rep.mean
                rows.append(BenchRow(LABELS[method], label, m["loglik"], m["err_filter"], m["err_smoother"],
                                     m["t_filter_s"], m["t_smoother_s"], nrep, seed0, per_seed=rep.per_seed))
            except Exception as exc:  # a failed row must not abort the suite
                nan = math.nan
                rows.append(BenchRow(LABELS.get(method, method), label, nan, nan, nan, nan, nan, nrep, seed0,
                                     error=f"{type(exc).__name__}: {exc}"))
    return rows


def scatter_points(rows: list[BenchRow]) -> list[dict]:
    """log10 total time against log10 smoother error for the successful rows."""
    pts = []
    for r in rows:
        t = r.t_filter_s + r.t_smoother_s
        if r.ok and t > 0 and r.err_smoother > 0:
            pts.append({"method": r.method, "knob": r.knob, "log10_time": math.log10(t),
                        "log10_error": math.log10(r.err_smoother)})
    return pts


def write_bench(rows: list[BenchRow], outdir, truth: TruthReference | None = None,
                extra: dict | None = None) -> dict[str, Path]:
    """Write ``bench.csv``, ``scatter.csv`` and ``bench.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"bench": outdir / "bench.csv", "scatter": outdir / "scatter.csv", "json": outdir / "bench.json"}
    with open(paths["bench"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.knob] + [_fmt(getattr(r, c)) for c in BENCH_COLUMNS[2:]])
    with open(paths["scatter"], "w", newline="") as fh:
        w = csv.DictWriter(fh, SCATTER_COLUMNS)
        w.writeheader()
        for p in scatter_points(rows):
            w.writerow({k: _fmt(v) for k, v in p.items()})
    doc = {"rows": [asdict(r) for r in rows],
           "truth_provenance": None if truth is None else truth.provenance}
    if extra:
        doc.update(extra)
    paths["json"].write_text(json.dumps(doc, indent=2, default=_json_default))
    return paths


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return v


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
