"""Command-line entry point: ``rbssm fit | run | bench | synth``.

Runs are described by a JSON config; flags override file values.  The
effective config, with every value marked as coming from a default, the
config file or a flag, is written to ``provenance.json`` and can be fed back
through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import copy
import csv
import ctypes
import ctypes.util
import json
import math
import sys
from pathlib import Path

import numpy as np

from .core import ParamVector, emit_bands_csv, emit_csv, ingest_csv, log_scale, summarize_bands
from .evaluation import (KNOBS, LABELS, STOCHASTIC, TruthReference, bench_table, build_truth, check_knobs,
                         run_method, worker_cap, write_bench)
from .kalman import kf_filter, ks_smooth, mle_fit
from .models import VARIANCE_NAMES, from_config, simulate
from .ngf import level_bounds

TOP_KEYS = {"data", "model", "method", "knobs", "seed", "outputs", "suite", "truth", "fit"}
DATA_KEYS = {"path", "column", "log", "synthetic"}
SYNTH_KEYS = {"model", "n", "seed", "x_init"}
OUTPUT_KEYS = {"dir"}
TRUTH_KEYS = {"method", "m", "reps", "seed0", "lag", "knobs", "file"}
FIT_KEYS = {"names", "bounds", "maxiter"}

DEFAULT_OUT = "rbssm_out"
FIT_BOX = (-8.0, 8.0)


class ConfigError(ValueError):
    pass


def tune_allocator() -> None:
    """Keep freed arenas around between time steps.

    The filters allocate and free the same large batch arrays every step;
    glibc's default thresholds hand them back to the OS each time, which
    costs about a third of the run time.  A no-op off glibc.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return
    # M_MMAP_THRESHOLD (-3) at its 32 MiB maximum, M_TRIM_THRESHOLD (-1), M_TOP_PAD (-2)
    for opt, val in ((-3, 32 * 1024 * 1024), (-1, 2**31 - 1), (-2, 512 * 1024 * 1024)):
        mallopt(opt, val)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


class Resolver:
    """Builds the effective config and remembers where each value came from."""

    def __init__(self, cfg: dict, sources: dict | None = None):
        self.cfg = cfg
        self.sources = dict(sources or {})

    def set(self, key: str, value, source: str):
        parts = key.split(".")
        d = self.cfg
        for p in parts[:-1]:
            d = d.setdefault(p, {})
        d[parts[-1]] = value
        self.sources[key] = source

    def get(self, key: str, default=None):
        d = self.cfg
        for p in key.split("."):
            if not isinstance(d, dict) or p not in d:
                return default
            d = d[p]
        return d

    def has(self, key: str) -> bool:
        sentinel = object()
        return self.get(key, sentinel) is not sentinel

    def default(self, key: str, value):
        if not self.has(key):
            self.set(key, value, "default")
        return self.get(key)

    def mark_config(self, d: dict, prefix: str = ""):
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict) and k not in ("x0", "prior"):
                self.mark_config(v, key + ".")
            else:
                self.sources.setdefault(key, "config")


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_config(path) -> tuple[dict, dict]:
    """Read a config file; a ``provenance.json`` is accepted as well."""
    if path is None:
        return {}, {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if isinstance(doc, dict) and "effective" in doc:
        return doc["effective"], {}
    return doc, {}


def validate(cfg: dict) -> None:
    _check_keys(cfg, TOP_KEYS, "config")
    if "data" in cfg:
        _check_keys(cfg["data"], DATA_KEYS, "data")
        syn = cfg["data"].get("synthetic")
        if syn is not None:
            _check_keys(syn, SYNTH_KEYS, "data.synthetic")
    if "outputs" in cfg:
        _check_keys(cfg["outputs"], OUTPUT_KEYS, "outputs")
    if "truth" in cfg:
        _check_keys(cfg["truth"], TRUTH_KEYS, "truth")
    if "fit" in cfg:
        _check_keys(cfg["fit"], FIT_KEYS, "fit")
    try:
        mc = {k: v for k, v in cfg.get("model", {}).items() if not (k == "x0" and v == "data")}
        from_config(mc)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]) if exc.args else str(exc)) from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(args, command: str) -> Resolver:
    cfg, _ = load_config(args.config)
    cfg = copy.deepcopy(cfg)
    validate(cfg)
    r = Resolver(cfg)
    r.mark_config(cfg)
    if getattr(args, "method", None):
        r.set("method", args.method, "flag")
    if getattr(args, "seed", None) is not None:
        r.set("seed", args.seed, "flag")
    if getattr(args, "out", None):
        r.set("outputs.dir", args.out, "flag")
    if getattr(args, "data", None):
        r.set("data.path", args.data, "flag")
    if getattr(args, "column", None) is not None:
        r.set("data.column", _parse_value(args.column), "flag")
    if getattr(args, "model", None):
        r.set("model.model", args.model, "flag")
    for item in getattr(args, "knob", None) or []:
        if "=" not in item:
            raise ConfigError(f"--knob expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        r.set(f"knobs.{k}", _parse_value(v), "flag")
    validate(r.cfg)
    r.default("outputs.dir", DEFAULT_OUT)
    return r


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def _synthesize(r: Resolver, prefix: str = "data.synthetic"):
    syn = r.get(prefix)
    mcfg_dict = syn.get("model", r.get("model", {}))
    if "model" not in syn:
        r.sources.setdefault(f"{prefix}.model", "default (top-level model)")
    n = r.default(f"{prefix}.n", 100)
    if "seed" not in syn:
        raise ConfigError("synthetic data needs an explicit seed")
    # a data-based initial state cannot be used before the data exist
    mc = from_config({k: v for k, v in mcfg_dict.items()
                      if k != "selforg" and not (k == "x0" and v == "data")})
    model = mc.family.model()
    x_init = syn.get("x_init")
    ys, states = simulate(model, int(n), int(syn["seed"]), None if x_init is None else np.asarray(x_init))
    return ys, states, model


def load_data(r: Resolver):
    data = r.get("data")
    if not data:
        raise ConfigError("no data source: give data.path, data.synthetic or --data")
    if "synthetic" in data:
        ys, _, _ = _synthesize(r)
    else:
        col = r.default("data.column", 0)
        ys = ingest_csv(data["path"], col)
        if r.default("data.log", False):
            ys = log_scale(ys)
    return ys


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _model_defaults(r: Resolver):
    kind = r.default("model.model", "trend1")
    if kind not in VARIANCE_NAMES:
        raise ConfigError(f"unsupported model {kind!r}")
    if kind == "seasonal":
        r.default("model.period", 12)
    for nm in VARIANCE_NAMES[kind]:
        r.default(f"model.params.{nm}", 1.0)
    so = r.get("model.selforg")
    if so is not None:
        from .models import DEFAULT_BOUNDS, DEFAULT_WALK_SD
        names = r.default("model.selforg.names", list(VARIANCE_NAMES[kind]))
        r.default("model.selforg.walk_sd", DEFAULT_WALK_SD)
        r.default("model.selforg.bounds", [list(DEFAULT_BOUNDS[kind][nm]) for nm in names])


def _method_defaults(r: Resolver, method: str, N: int):
    try:
        check_knobs(method, r.get("knobs", {}) or {})
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if method in ("pf", "rbpf", "twostep"):
        r.default("knobs.lag", N)
        r.default("knobs.resample", "stratified")
    if method == "twostep":
        r.default("knobs.repeats", 5)
        r.default("knobs.weighted", False)
    if method == "rbngf":
        r.default("knobs.merge", True)
    if method in STOCHASTIC and r.get("seed") is None:
        raise ConfigError(f"method {method} is stochastic: pass --seed (or set \"seed\" in the config)")


def _outdir(r: Resolver) -> Path:
    p = Path(r.get("outputs.dir"))
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_provenance(r: Resolver, outdir: Path, command: str, extra: dict | None = None) -> Path:
    doc = {"command": command, "effective": r.cfg,
           "sources": dict(sorted(r.sources.items())), "threads": worker_cap()}
    if extra:
        doc.update(extra)
    p = outdir / "provenance.json"
    _write_json(p, doc)
    return p


def cmd_fit(r: Resolver) -> dict:
    _model_defaults(r)
    ys = load_data(r)
    mc = from_config(r.get("model"), ys)
    fam = mc.family
    names = list(r.default("fit.names", list(VARIANCE_NAMES[fam.kind])))
    bad = set(names) - set(VARIANCE_NAMES[fam.kind])
    if bad:
        raise ConfigError(f"fit.names: {sorted(bad)} are not variances of {fam.kind}")
    bounds = r.default("fit.bounds", [list(FIT_BOX)] * len(names))
    maxiter = r.default("fit.maxiter", 2000)
    init = ParamVector([math.log10(fam.params[nm]) for nm in names], names, bounds)
    family_fn = lambda th: fam.model(**{nm: 10.0 ** v for nm, v in zip(names, th)})
    res = mle_fit(family_fn, ys, init, maxiter=int(maxiter))
    outdir = _outdir(r)
    fitted = {nm: 10.0 ** c for nm, c in zip(names, res.params.coords)}
    doc = {"model": fam.kind,
           "params": {nm: {"variance": fitted[nm], "log10": float(c)} for nm, c in zip(names, res.params.coords)},
           "fixed": {nm: v for nm, v in fam.params.items() if nm not in names},
           "loglik": res.loglik, "iterations": res.iterations, "evaluations": res.evaluations,
           "hit_cap": res.hit_cap, "at_bound": [nm for nm, c in zip(names, res.clamped) if c]}
    _write_json(outdir / "fit.json", doc)
    model = fam.model(**fitted)
    run = kf_filter(model, ys)
    sm = ks_smooth(run)
    for comp, sel in model.components.items():
        mean = sm.mean @ sel
        sd = np.sqrt(np.maximum(np.einsum("i,nij,j->n", sel, sm.cov, sel), 0.0))
        emit_bands_csv(summarize_bands(mean, sd), outdir / f"smoother_{comp}.csv")
    write_provenance(r, outdir, "fit")
    return doc


def _write_theta_paths(out, path: Path) -> None:
    paths = out.info.pop("theta_paths")
    names = out.info.pop("theta_names")
    np_, N, d = paths.shape
    header = ["n"] + [f"log10_{nm}_p{j}" for nm in names for j in range(np_)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(N):
            w.writerow([i + 1] + [repr(float(paths[j, i, c])) for c in range(d) for j in range(np_)])


def cmd_run(r: Resolver) -> dict:
    method = r.get("method")
    if method is None:
        raise ConfigError("no method: set \"method\" or pass --method")
    _model_defaults(r)
    ys = load_data(r)
    if not r.has("knobs"):
        r.cfg["knobs"] = {}
    _method_defaults(r, method, ys.n)
    mc = from_config(r.get("model"), ys)
    if method == "ngf" and "bounds" not in r.get("knobs"):
        r.set("knobs.bounds", list(level_bounds(ys)), "default")
    if method == "ngf" and mc.aug is not None:
        r.default("knobs.param_nodes", 101)
    seed = r.get("seed")
    out = run_method(method, mc, ys, r.get("knobs"), seed if method in STOCHASTIC else None)
    outdir = _outdir(r)
    if "theta_paths" in out.info:
        _write_theta_paths(out, outdir / "theta_paths.csv")
    written = out.write(outdir)
    doc = {"method": out.method, "loglik": out.loglik, "timings": out.timings,
           "info": {k: v for k, v in out.info.items() if not isinstance(v, np.ndarray)},
           "files": [p.name for p in written]}
    _write_json(outdir / "summary.json", doc)
    write_provenance(r, outdir, "run")
    return doc


def cmd_bench(r: Resolver) -> dict:
    suite = r.get("suite")
    if not suite:
        raise ConfigError("bench needs a non-empty \"suite\" list")
    _model_defaults(r)
    ys = load_data(r)
    mc = from_config(r.get("model"), ys)
    for j, entry in enumerate(suite):
        if entry.get("method") in STOCHASTIC and "seed0" not in entry:
            seed = r.get("seed")
            if seed is None:
                raise ConfigError(f"suite entry {j} ({entry.get('method')}) needs seed0 or a global --seed")
            entry["seed0"] = seed
            r.sources[f"suite[{j}].seed0"] = "flag" if r.sources.get("seed") == "flag" else "config"
        if entry.get("method") not in LABELS:
            raise ConfigError(f"suite entry {j}: unknown method {entry.get('method')!r}")
    truth = None
    tcfg = r.get("truth")
    if tcfg is not None and tcfg.get("file"):
        truth = TruthReference.from_json(json.loads(Path(tcfg["file"]).read_text()))
    elif tcfg is not None:
        tm = r.default("truth.method", "rbpf")
        reps = int(r.default("truth.reps", 10))
        seed0 = int(r.default("truth.seed0", 10_000))
        m = int(r.default("truth.m", 200_000))
        lag = r.default("truth.lag", ys.n)
        truth = build_truth(mc, ys, m, reps, list(range(seed0, seed0 + reps)), tm, lag, tcfg.get("knobs"))
    rows = bench_table(suite, mc, ys, truth)
    outdir = _outdir(r)
    write_bench(rows, outdir, truth)
    if truth is not None:
        _write_json(outdir / "truth.json", truth.to_json())
    write_provenance(r, outdir, "bench", {"truth_provenance": None if truth is None else truth.provenance})
    return {"rows": len(rows), "failed": sum(not row.ok for row in rows)}


def cmd_synth(r: Resolver) -> dict:
    if not r.has("data.synthetic"):
        r.set("data.synthetic", {}, "default")
    seed = r.get("seed")
    if seed is not None and r.sources.get("seed") == "flag":
        r.set("data.synthetic.seed", seed, "flag")
    elif not r.has("data.synthetic.seed"):
        if seed is None:
            raise ConfigError("synth needs --seed")
        r.set("data.synthetic.seed", seed, r.sources.get("seed", "flag"))
    if r.get("data.synthetic.model") is None:
        _model_defaults(r)
    ys, states, model = _synthesize(r)
    outdir = _outdir(r)
    emit_csv(ys, outdir / "synthetic.csv")
    comps = model.components
    with open(outdir / "states.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + list(comps))
        for i in range(states.shape[0]):
            w.writerow([i + 1] + [repr(float(states[i] @ sel)) for sel in comps.values()])
    write_provenance(r, outdir, "synth")
    return {"n": ys.n, "path": str(outdir / "synthetic.csv")}


COMMANDS = {"fit": cmd_fit, "run": cmd_run, "bench": cmd_bench, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbssm", description="Particle, grid and Rao-Blackwellized "
                                 "filters for self-organizing state-space models.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("fit", "maximum likelihood fit of a linear-Gaussian model"),
                        ("run", "run one filtering/smoothing method"),
                        ("bench", "run a benchmark suite against a truth reference"),
                        ("synth", "simulate a series from a model at known parameters")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", help="JSON config (a provenance.json also works)")
        p.add_argument("--seed", type=int, help="random seed (required for stochastic methods)")
        p.add_argument("--out", "-o", help=f"output directory (default {DEFAULT_OUT})")
        p.add_argument("--data", help="input CSV")
        p.add_argument("--column", help="CSV column name or 0-based index")
        p.add_argument("--model", choices=sorted(VARIANCE_NAMES), help="model family")
        if name == "run":
            p.add_argument("--method", choices=sorted(KNOBS), help="inference method")
            p.add_argument("--knob", action="append", metavar="KEY=VALUE",
                           help="method knob, e.g. m=10000 (repeatable)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        r = resolve(args, args.command)
        result = COMMANDS[args.command](r)
    except (ConfigError, KeyError, ValueError, MemoryError, FloatingPointError, OSError,
            np.linalg.LinAlgError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rbssm {args.command}: error: {msg}", file=sys.stderr)
        return 2
    print(json.dumps(result, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
