"""Command-line driver: config loading, experiment dispatch, manifests.

Usage::

    stablemix <experiment> --config cfg.json [--seed S] [--out DIR] [--workers W]
    stablemix replay DIR/manifest.json [--out DIR] [--workers W]

The config is a JSON object with the blocks ``model``, ``experiment``, ``run``
and ``grid``; only ``model.kind`` is required.  Every default is resolved at
load time and echoed into ``manifest.json``.  Numeric outputs never depend on
the worker count.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import math
import sys
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from . import coupling, harris, io, kernel_lab
from .dynamics import (DiagonalGenerator, MatrixGenerator, ModelSpec, constant_drift, heat_example_config,
                       holder_drift, simulate_path, tanh_drift, zero_drift)
from .errors import ConfigError, NumericalError
from .stable_noise import SpectralMeasure, noise_selftest, reset_resample_count, resample_count, validate_alpha

EXPERIMENTS = ("noise_selftest", "trajectory", "kernel", "gradient_probe", "irreducibility", "coupling",
               "harris", "mixing")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INCONCLUSIVE = 0, 2, 3, 4

BLOCKS = ("model", "experiment", "run", "grid")
MODEL_KEYS = {
    "heat": {"kind", "d", "alpha", "theta", "eps", "K", "drift", "scheme", "dt"},
    "diagonal": {"kind", "gammas", "betas", "alpha", "theta", "eps", "drift", "scheme", "dt"},
    "matrix": {"kind", "A", "alpha", "spectral", "drift", "scheme", "dt"},
}
EXPERIMENT_KEYS = {
    "noise_selftest": {"alpha", "lams", "N"},
    "trajectory": {"x0", "T", "track_drift"},
    "kernel": {"x", "T", "N"},
    "gradient_probe": {"x", "y", "test", "times", "N", "crn"},
    "irreducibility": {"x", "center_scales", "radius_scales", "T", "N"},
    "coupling": {"x1", "x2", "T", "p", "eps", "N_kernel", "n_runs", "max_steps", "N_probe"},
    "harris": {"p", "T0", "R_levels", "N", "n_pairs", "N_kernel"},
    "mixing": {"x1", "x2", "T", "n_times", "N"},
}


@dataclass
class ExperimentConfig:
    """Validated configuration; ``data`` is the effective (fully defaulted) dict."""

    data: dict
    model: ModelSpec
    grid: kernel_lab.Grid

    @property
    def experiment(self) -> str:
        return self.data["experiment"]["name"]

    @property
    def seed(self) -> int:
        return self.data["run"]["seed"]


@dataclass
class RunManifest:
    config: dict
    version: str
    seed: int
    started: str
    finished: str
    files: list
    status: str

    def to_dict(self) -> dict:
        return {"config": self.config, "version": self.version, "seed": self.seed, "started": self.started,
                "finished": self.finished, "files": self.files, "status": self.status}


# ------------------------------------------------------------------ config


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _unknown(d: dict, allowed: set, path: str):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown field {extra[0]!r}", f"{path}.{extra[0]}" if path else extra[0])


def _num(d: dict, key: str, path: str, default=None, positive: bool = False, integer: bool = False):
    v = d.get(key, default)
    where = f"{path}.{key}"
    if v is None:
        raise ConfigError("missing required field", where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {type(v).__name__}", where)
    if integer and int(v) != v:
        raise ConfigError("expected an integer", where)
    if positive and not v > 0:
        raise ConfigError("must be positive", where)
    d[key] = int(v) if integer else float(v)
    return d[key]


def _vector(d: dict, key: str, path: str, K: int, default):
    v = d.get(key)
    if v is None:
        v = [float(t) for t in default]
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a list of numbers", f"{path}.{key}") from None
    if arr.shape != (K,):
        raise ConfigError(f"expected {K} components, got shape {arr.shape}", f"{path}.{key}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("components must be finite", f"{path}.{key}")
    d[key] = arr.tolist()
    return arr


def _guard(path: str, fn, *args, **kw):
    """Run a module constructor, turning its precondition errors into ConfigError."""
    try:
        return fn(*args, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), path) from None


def _build_drift(m: dict, K: int, diagonal: bool):
    d = m.setdefault("drift", {})
    if not isinstance(d, dict):
        raise ConfigError("expected an object", "model.drift")
    fam = d.setdefault("family", "tanh" if diagonal else "holder")
    allowed = {"zero": {"family"}, "constant": {"family", "value"}, "tanh": {"family", "sup_norm", "gain"},
               "holder": {"family", "eta", "sup_norm", "gain"}}
    if fam not in allowed:
        raise ConfigError(f"unknown drift family {fam!r} (choose from {sorted(allowed)})", "model.drift.family")
    _unknown(d, allowed[fam], "model.drift")
    if fam == "zero":
        return zero_drift()
    if fam == "constant":
        c = _vector(d, "value", "model.drift", K, np.zeros(K))
        return _guard("model.drift", constant_drift, c)
    s = _num(d, "sup_norm", "model.drift", 1.0)
    g = _num(d, "gain", "model.drift", 1.0)
    if fam == "tanh":
        return _guard("model.drift", tanh_drift, K, s, g)
    eta = _num(d, "eta", "model.drift", 0.5)
    return _guard("model.drift", holder_drift, K, eta, s, g)


def _build_model(m: dict) -> ModelSpec:
    if not isinstance(m, dict):
        raise ConfigError("expected an object", "model")
    kind = m.get("kind")
    if kind not in MODEL_KEYS:
        raise ConfigError(f"model kind must be one of {sorted(MODEL_KEYS)}", "model.kind")
    _unknown(m, MODEL_KEYS[kind], "model")
    alpha = _num(m, "alpha", "model", 1.5)
    _guard("model.alpha", validate_alpha, alpha, kind == "matrix")
    dt = _num(m, "dt", "model", 1e-2, positive=True)
    if kind == "heat":
        d = _num(m, "d", "model", 1, integer=True)
        theta = _num(m, "theta", "model", 0.5)
        eps = _num(m, "eps", "model", 0.1)
        K = _num(m, "K", "model", 64, positive=True, integer=True)
        gen = _guard("model", heat_example_config, d, alpha, theta, eps, K)
    elif kind == "diagonal":
        for key in ("gammas", "betas"):
            if key not in m:
                raise ConfigError("missing required field", f"model.{key}")
        theta = _num(m, "theta", "model", 0.5)
        eps = _num(m, "eps", "model", 0.1)
        gen = _guard("model", DiagonalGenerator, np.asarray(m["gammas"], dtype=float),
                     np.asarray(m["betas"], dtype=float), alpha, eps, theta)
    else:
        if "A" not in m:
            raise ConfigError("missing required field", "model.A")
        gen = _guard("model.A", MatrixGenerator, np.asarray(m["A"], dtype=float))
    diagonal = kind != "matrix"
    drift = _build_drift(m, gen.K, diagonal)
    scheme = m.setdefault("scheme", "exponential_euler" if diagonal else "euler")
    if diagonal:
        noise = "cylindrical"
    else:
        sp = m.setdefault("spectral", {})
        _unknown(sp, {"directions", "weights"}, "model.spectral")
        default = SpectralMeasure.axes(gen.K)
        sp.setdefault("directions", default.directions.tolist())
        sp.setdefault("weights", default.weights.tolist())
        noise = _guard("model.spectral", SpectralMeasure, np.asarray(sp["directions"], dtype=float),
                       np.asarray(sp["weights"], dtype=float))
    return _guard("model", ModelSpec, gen, drift, noise, scheme, dt, None if diagonal else alpha)


def _ceil_dt(t: float, dt: float) -> float:
    return math.ceil(t / dt - 1e-9) * dt


def _resolve_experiment(e: dict, model: ModelSpec) -> None:
    name = e["name"]
    _unknown(e, EXPERIMENT_KEYS[name] | {"name"}, "experiment")
    K, P = model.K, "experiment"
    s = model.stationary_scale()
    e1 = np.zeros(K)
    e1[0] = 1.0
    short = 5 * model.dt
    if name == "noise_selftest":
        _num(e, "alpha", P, model.alpha)
        _guard("experiment.alpha", validate_alpha, e["alpha"])
        e.setdefault("lams", [0.5, 1.0, 2.0])
        _num(e, "N", P, 100_000, positive=True, integer=True)
    elif name == "trajectory":
        _vector(e, "x0", P, K, np.zeros(K))
        _num(e, "T", P, 1.0, positive=True)
        e["track_drift"] = bool(e.get("track_drift", False))
    elif name == "kernel":
        _vector(e, "x", P, K, np.zeros(K))
        _num(e, "T", P, _ceil_dt(1.0 / model.gamma1, model.dt), positive=True)
        _num(e, "N", P, 10_000, positive=True, integer=True)
    elif name == "gradient_probe":
        h = 0.02 * s
        _vector(e, "x", P, K, 0.5 * h * e1)
        _vector(e, "y", P, K, -0.5 * h * e1)
        t = e.setdefault("test", {})
        t.setdefault("kind", "halfspace")
        if t["kind"] == "halfspace":
            _unknown(t, {"kind", "u", "c"}, "experiment.test")
            _vector(t, "u", "experiment.test", K, e1)
            _num(t, "c", "experiment.test", 0.0)
        elif t["kind"] == "cosine":
            _unknown(t, {"kind", "lam", "coord"}, "experiment.test")
            _num(t, "lam", "experiment.test", 1.0 / s)
            _num(t, "coord", "experiment.test", 0, integer=True)
        else:
            raise ConfigError("test kind must be 'halfspace' or 'cosine'", "experiment.test.kind")
        e.setdefault("times", [0.02, 0.05, 0.1, 0.2, 0.5])
        _num(e, "N", P, 10_000, positive=True, integer=True)
        e["crn"] = bool(e.get("crn", True))
    elif name == "irreducibility":
        _vector(e, "x", P, K, np.zeros(K))
        _num(e, "center_scales", P, 5.0)
        _num(e, "radius_scales", P, 1.0, positive=True)
        _num(e, "T", P, _ceil_dt(3.0 / model.gamma1, model.dt), positive=True)
        _num(e, "N", P, 100_000, integer=True)
        if e["N"] < 1000:
            raise ConfigError("N must be at least 1000", "experiment.N")
    elif name == "coupling":
        _vector(e, "x1", P, K, 4 * s * e1)
        _vector(e, "x2", P, K, -4 * s * e1)
        _num(e, "T", P, short, positive=True)
        _num(e, "p", P, model.alpha / 2, positive=True)
        _num(e, "eps", P, model.generator.eps if model.is_diagonal else 0.0)
        _num(e, "N_kernel", P, 2000, positive=True, integer=True)
        _num(e, "n_runs", P, 1000, positive=True, integer=True)
        _num(e, "max_steps", P, 400, positive=True, integer=True)
        _num(e, "N_probe", P, 10_000, positive=True, integer=True)
    elif name == "harris":
        _num(e, "p", P, model.alpha / 2, positive=True)
        _num(e, "T0", P, harris.default_T0(model, e["p"]), positive=True)
        e.setdefault("R_levels", [4.0])
        _num(e, "N", P, 10_000, positive=True, integer=True)
        _num(e, "n_pairs", P, 32, positive=True, integer=True)
        _num(e, "N_kernel", P, 100_000, positive=True, integer=True)
    elif name == "mixing":
        _vector(e, "x1", P, K, 4 * s * e1)
        _vector(e, "x2", P, K, -4 * s * e1)
        _num(e, "T", P, short, positive=True)
        _num(e, "n_times", P, 20, positive=True, integer=True)
        _num(e, "N", P, 100_000, positive=True, integer=True)
    if "p" in e and not e["p"] < model.alpha:
        raise ConfigError(f"moment may be infinite: p must be below alpha={model.alpha}", "experiment.p")


def _build_grid(g: dict, model: ModelSpec) -> kernel_lab.Grid:
    if not isinstance(g, dict):
        raise ConfigError("expected an object", "grid")
    _unknown(g, {"bins", "scales", "retained", "lower", "upper"}, "grid")
    _num(g, "bins", "grid", kernel_lab.DEFAULT_BINS, positive=True, integer=True)
    if "lower" in g or "upper" in g:
        if not ("lower" in g and "upper" in g):
            raise ConfigError("lower and upper must be given together", "grid")
        grid = _guard("grid", kernel_lab.Grid, g["lower"], g["upper"], g["bins"])
    else:
        _num(g, "scales", "grid", kernel_lab.DEFAULT_SCALES, positive=True)
        _num(g, "retained", "grid", min(model.K, 2), positive=True, integer=True)
        if g["retained"] > min(model.K, 3):
            raise ConfigError(f"at most {min(model.K, 3)} retained coordinates", "grid.retained")
        grid = _guard("grid", kernel_lab.Grid.default_for, model, g["retained"], g["bins"], g["scales"])
    g["lower"], g["upper"] = grid.lower.tolist(), grid.upper.tolist()
    g["retained"] = grid.m
    return grid


def validate_config(raw: dict, experiment: str | None = None) -> ExperimentConfig:
    """Validate a config dict and resolve every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "")
    data = copy.deepcopy(raw)
    _unknown(data, set(BLOCKS), "")
    model = _build_model(data.setdefault("model", {}))
    exp = data.setdefault("experiment", {})
    if isinstance(exp, str):
        exp = data["experiment"] = {"name": exp}
    if experiment is not None:
        if exp.get("name", experiment) != experiment:
            raise ConfigError(f"config names experiment {exp['name']!r} but {experiment!r} was requested",
                              "experiment.name")
        exp["name"] = experiment
    exp.setdefault("name", "trajectory")
    if exp["name"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {list(EXPERIMENTS)}", "experiment.name")
    _resolve_experiment(exp, model)
    run = data.setdefault("run", {})
    _unknown(run, {"seed", "workers", "out"}, "run")
    _num(run, "seed", "run", 0, integer=True)
    if run["seed"] < 0:
        raise ConfigError("seed must be nonnegative", "run.seed")
    _num(run, "workers", "run", 1, positive=True, integer=True)
    run.setdefault("out", "out")
    grid = _build_grid(data.setdefault("grid", {}), model)
    return ExperimentConfig(data, model, grid)


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", "")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}", "") from None
    return validate_config(raw, experiment)


# ------------------------------------------------------------------ experiments


def _test_function(t: dict):
    if t["kind"] == "halfspace":
        return kernel_lab.HalfSpaceIndicator(t["u"], t["c"])
    return kernel_lab.CosineTest(t["lam"], t["coord"])


def _exp_noise_selftest(cfg, e, rng, out, workers, files):
    rows = noise_selftest(e["alpha"], e["lams"], e["N"], rng)
    files.append(_csv(out, "noise_selftest.csv", ["lambda", "empirical_cf", "analytic_cf"], rows))
    return "ok"


def _exp_trajectory(cfg, e, rng, out, workers, files):
    tr = simulate_path(cfg.model, np.asarray(e["x0"]), e["T"], rng, track_drift=e["track_drift"])
    path = out / "trajectory.csv"
    tr.to_csv(path)
    files.append(path)
    return "ok"


def _exp_kernel(cfg, e, rng, out, workers, files):
    k = kernel_lab.estimate_kernel(cfg.model, np.asarray(e["x"]), e["T"], e["N"], cfg.grid, rng, workers)
    files.append(_json(out, "kernel.json", k.to_dict()))
    files.append(_csv(out, "kernel.csv", ["cell", "weight"], [(i, float(w)) for i, w in enumerate(k.weights)]))
    return "ok"


def _exp_gradient_probe(cfg, e, rng, out, workers, files):
    scan = kernel_lab.gradient_scan(cfg.model, _test_function(e["test"]), e["x"], e["y"], e["times"], e["N"],
                                    rng, e["crn"], workers)
    files.append(_csv(out, "gradient_probe.csv", ["T", "ratio", "se", "flagged"], scan.rows()))
    files.append(_json(out, "gradient_fit.json", {"slope": scan.slope, "intercept": scan.intercept,
                                                  "reference_slope": -1.0 / cfg.model.alpha}))
    return "ok"


def _exp_irreducibility(cfg, e, rng, out, workers, files):
    m = cfg.model
    s = m.stationary_scale()
    centre = np.zeros(m.K)
    centre[0] = e["center_scales"] * s
    r = e["radius_scales"] * s
    hf = kernel_lab.irreducibility_probe(m, np.asarray(e["x"]), centre, r, e["T"], e["N"], rng, workers)
    files.append(_json(out, "irreducibility.json", {
        "center": centre, "radius": r, "horizon": e["T"], "hits": hf.hits, "n": hf.n,
        "frequency": hf.frequency, "wilson_lower": hf.lower, "wilson_upper": hf.upper,
        "positive": hf.lower > 0}))
    return "ok"


def _exp_coupling(cfg, e, rng, out, workers, files):
    m = cfg.model
    ccfg = coupling.configure_coupling(m, e["T"], cfg.grid, rng, p=e["p"], eps=e["eps"], N_kernel=e["N_kernel"],
                                       N_probe=e["N_probe"], workers=workers)
    x1, x2 = np.asarray(e["x1"]), np.asarray(e["x2"])
    runs = coupling.run_coupled_ensemble(x1, x2, m, ccfg, e["max_steps"], e["n_runs"], rng, workers)
    calib = {"T": ccfg.T, "r": ccfg.r, "M": ccfg.M, "eps": ccfg.eps}
    path = out / "coupled_runs.jsonl"
    io.write_jsonl(path, [r.to_record(calib) for r in runs])
    files.append(path)
    summary = {"config": ccfg.to_dict()}
    for name in ("tau_eps", "tau", "rho"):
        t = [getattr(r, name) for r in runs]
        S, se = coupling.survival(t, e["max_steps"])
        entry = {"survival": S, "se": se, "censored": int(sum(math.isinf(v) for v in t))}
        try:
            f = coupling.exp_moment_fit(t, ccfg.T, censor_at=e["max_steps"] + 1)
            entry["fit"] = {"eta_hat": f.eta_hat, "C_hat": f.C_hat, "r_squared": f.r_squared,
                            "n_points": f.n_points, "degenerate": f.degenerate, "exp_moment": f.exp_moment}
        except ValueError as exc:
            entry["fit"] = {"error": str(exc)}
        summary[name] = entry
    drift = ccfg.calibration[-1]
    S = np.asarray(summary["tau_eps"]["survival"])
    bound = coupling.hitting_tail_bound(drift["q"], np.arange(S.size), x1, x2, e["p"], ccfg.eps, m)
    summary["tau_eps"]["tail_bound"] = bound
    summary["tau_eps"]["dominated"] = bool(np.all(S <= bound))
    files.append(_json(out, "coupling_summary.json", summary))
    return "ok"


def _exp_harris(cfg, e, rng, out, workers, files):
    rep = harris.harris_report(cfg.model, e["p"], e["T0"], e["R_levels"], None, e["N"], e["n_pairs"],
                               e["N_kernel"], cfg.grid, rng, workers)
    files.append(_json(out, "harris_report.json", rep.to_dict()))
    return rep.verdict


def _exp_mixing(cfg, e, rng, out, workers, files):
    times = [round(e["T"] * k, 12) for k in range(1, e["n_times"] + 1)]
    fit = harris.mixing_fit(cfg.model, harris.PointMass(e["x1"]), harris.PointMass(e["x2"]), times, e["N"],
                            cfg.grid, e["T"], rng, workers)
    files.append(_csv(out, "mixing_curve.csv", ["t", "tv", "se"], fit.rows()))
    files.append(_json(out, "mixing_fit.json", fit.to_dict()))
    return "ok"


def _csv(out, name, header, rows):
    path = out / name
    io.write_csv(path, header, rows)
    return path


def _json(out, name, obj):
    path = out / name
    io.write_json(path, obj)
    return path


_DISPATCH = {name: globals()[f"_exp_{name}"] for name in EXPERIMENTS}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_experiment(cfg: ExperimentConfig, out=None, workers: int | None = None) -> RunManifest:
    """Execute the configured experiment and write its outputs plus ``manifest.json``.

    On any exception, files written by this call are removed before re-raising.
    """
    out = Path(out if out is not None else cfg.data["run"]["out"])
    if workers is not None:
        cfg.data["run"]["workers"] = int(workers)
    workers = cfg.data["run"]["workers"]
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    files: list[Path] = []
    reset_resample_count()
    rng = np.random.default_rng(cfg.seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            status = _DISPATCH[cfg.experiment](cfg, cfg.data["experiment"], rng, out, workers, files)
    except BaseException:
        for f in files:
            Path(f).unlink(missing_ok=True)
        raise
    listing = [{"name": Path(f).name, "sha256": io.sha256(f)} for f in files]
    man = RunManifest(cfg.data, _version(), cfg.seed, started, _now(), listing, status)
    d = man.to_dict()
    d["resampled_draws"] = resample_count()
    io.write_json(out / "manifest.json", d)
    return man


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stablemix", description="Diagnostics for stable-driven SDEs/SPDEs.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--out", help="output directory (overrides run.out)")
        sp.add_argument("--workers", type=int, help="worker processes (overrides run.workers)")
    rp = sub.add_parser("replay", help="re-run the effective config recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    rp.add_argument("--workers", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            man = json.loads(Path(args.manifest).read_text())
            cfg = validate_config(man["config"])
        else:
            cfg = load_config(args.config, args.command)
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigError("seed must be nonnegative", "run.seed")
                cfg.data["run"]["seed"] = args.seed
        if args.out is not None:
            cfg.data["run"]["out"] = args.out
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers must be positive", "run.workers")
            cfg.data["run"]["workers"] = args.workers
        man = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{cfg.experiment}: {man.status}; wrote {len(man.files)} file(s) to {cfg.data['run']['out']}")
    if man.status == "inconclusive":
        return EXIT_INCONCLUSIVE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
