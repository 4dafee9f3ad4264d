"""Experiment runner: config files in, CSV/JSON/SVG artifacts out.

A config is a single YAML (or JSON) mapping::

    experiment: compare          # coefficients | occupation | exit-times | marginals | bvp | compare
    model: {name: annulus, forcing: radial, x_O: [1.5, 0.0]}
    eps: [0.1, 0.03, 0.01]       # strictly decreasing, simulation experiments only
    sim: {T: 2.0, n_paths: 10000, seed: 12345, dt_factor: 0.01, scheme: split, block_size: 256}
    workers: 1
    params: {...}                # experiment specific, see DEFAULT_PARAMS
    output: {dir: out, plots: true}

Every run writes ``manifest.json`` (config echo, seed, library versions,
wall clock), one or more CSV tables, result JSON documents and
``summary.txt``.  Tables and result documents are byte-reproducible for a
fixed config; the manifest is not, since it records timing and the worker
count.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bvp import evaluate, solve_bvp, solve_bvp_fd
from .graph import GraphPoint, compute_coefficients, identify
from .model import build_model, validate
from .process import build_generator, marginal_at, stationary
from .sde import (RNG_ALGORITHM, SimConfig, empirical_marginal, estimate_exit_time, feynman_kac_many,
                  simulate_occupation)

__all__ = ["ExperimentConfig", "ConfigError", "ExperimentResult", "run", "run_experiment", "plot",
           "EXPERIMENTS", "DEFAULT_PROBES", "fit_loglog", "write_csv", "load_config"]

EXPERIMENTS = ("coefficients", "occupation", "exit-times", "marginals", "bvp", "compare")
SIMULATION = ("occupation", "exit-times", "marginals", "compare")

DEFAULT_PROBES = [[0.0, 0.0], [0.25, 0.0], [0.5, 0.0], [0.75, 0.0], [0.95, 0.0],
                  [1.2, 0.0], [1.5, 0.0], [1.75, 0.0], [1.95, 0.0]]

DEFAULT_PARAMS = {
    "coefficients": {"n": 512, "n_nodes": 256, "tol": 1e-6},
    "occupation": {"x0": None, "tol": 0.05, "n_cells": 256, "stationary_tol": 1e-10},
    "exit-times": {"min_slope_transit": 0.7, "max_slope_hit": 0.35},
    "marginals": {"x0": [0.5, 0.0], "n_bins": 32, "n_cells": 256, "tv_max": 0.05},
    "bvp": {"n": 512, "fd_n": 512, "gluing_tol": 1e-8, "oracle_tol": 1e-6},
    "compare": {"probes": DEFAULT_PROBES, "t_max": 4.0, "n_windows": 16, "band": 0.05,
                "max_doublings": 2},
}

DEFAULT_SIM = {"T": 1.0, "n_paths": 1000, "seed": 0, "dt_factor": 0.01, "scheme": "split",
               "block_size": 256}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    model: dict
    eps: list
    sim: dict
    params: dict
    out: str
    plots: bool = True
    workers: int = 1
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, doc, out=None, workers=None):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(doc) - {"experiment", "model", "eps", "sim", "params", "output", "workers"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        name = doc.get("experiment")
        if name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {name!r}; expected one of {list(EXPERIMENTS)}")
        eps = [float(e) for e in (doc.get("eps") or [])]
        if name in SIMULATION:
            if not eps:
                raise ConfigError("eps ladder is empty")
            if any(e <= 0 for e in eps):
                raise ConfigError("eps values must be positive")
            if any(b >= a for a, b in zip(eps, eps[1:])):
                raise ConfigError("eps ladder must be strictly decreasing")
        sim = dict(DEFAULT_SIM)
        sim.update(doc.get("sim") or {})
        bad = set(sim) - set(DEFAULT_SIM)
        if bad:
            raise ConfigError(f"unknown sim keys: {sorted(bad)}")
        params = copy.deepcopy(DEFAULT_PARAMS[name])
        extra = set(doc.get("params") or {}) - set(params)
        if extra:
            raise ConfigError(f"unknown params for {name}: {sorted(extra)}")
        params.update(doc.get("params") or {})
        output = dict(doc.get("output") or {})
        out = out or output.get("dir") or f"out/{name}"
        workers = int(workers if workers is not None else doc.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        cfg = cls(name, dict(doc.get("model") or {"name": "annulus"}), eps, sim, params, str(out),
                  bool(output.get("plots", True)), workers, copy.deepcopy(doc))
        try:
            build_model(cfg.model)
            for e in eps:
                cfg.sim_config(e)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def sim_config(self, eps):
        s = self.sim
        return SimConfig(eps=eps, T=float(s["T"]), n_paths=int(s["n_paths"]), seed=int(s["seed"]),
                         dt=float(s["dt_factor"]) * eps, scheme=s["scheme"],
                         block_size=int(s["block_size"]), workers=self.workers)


def load_config(path, out=None, workers=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_mapping(doc, out, workers)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    documents: dict = field(default_factory=dict)  # name -> JSON-able object
    checks: list = field(default_factory=list)
    plots: list = field(default_factory=list)  # (table name, plot spec)
    summary: list = field(default_factory=list)

    def check(self, name, passed, detail):
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


# ---------------------------------------------------------------------------
# helpers


def fit_loglog(x, y):
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return float("nan"), float("nan")
    slope, icpt = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(icpt)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """RFC-4180 CSV with a header row and CRLF line ends."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames or [], list(reader)


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _monotone_decreasing(v):
    return all(b < a for a, b in zip(v, v[1:]))


# ---------------------------------------------------------------------------
# experiments


def exp_coefficients(cfg, model, coeffs):
    res = ExperimentResult()
    p = cfg.params
    rep = validate(model)
    res.check("model_validation", rep.passed, rep.summary().replace("\n", "; "))
    k = 1
    h = coeffs.h[0]
    res.tables["coefficients"] = (["k", "h", "M", "abar", "fbar"],
                                  [(k, h[i], coeffs.M[0][i], coeffs.abar[0][i], coeffs.fbar[0][i])
                                   for i in range(len(h))])
    res.documents["coefficients"] = json.loads(coeffs.to_json())
    tol = float(p["tol"])
    compat = coeffs.compatibility_residual()
    res.check("compatibility", abs(compat) <= tol, f"residual {compat:.3e}")
    for k in range(1, coeffs.edge_count + 1):
        pk = coeffs.p[k - 1]
        lim = coeffs.flux_coefficient(k)[-1]
        res.check(f"p_{k}_limit", abs(pk - lim) <= tol * abs(pk), f"p={float(pk)!r} M*abar(0-)={float(lim)!r}")
        vu = coeffs.vol_U[k - 1]
        ev = coeffs.edge_volume(k)
        res.check(f"coarea_{k}", abs(ev - vu) <= tol * vu, f"int M dh={float(ev)!r} Vol(U)={float(vu)!r}")
    if cfg.model.get("name", "annulus") == "annulus" and model.forcing == "radial" and model.f_offset == 0:
        closed = {"M": np.full_like(h, 2 * np.pi), "abar": 2 * h + 1,
                  "fbar": np.sqrt(np.clip(2 * h + 1, 0, None)) - 4 / 3}
        for name, ref in closed.items():
            got = getattr(coeffs, name)[0]
            err = float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)))
            res.check(f"closed_form_{name}", err <= tol, f"max rel err {err:.2e}")
        for name, got, ref in (("p", coeffs.p[0], 2 * np.pi), ("vol_E", coeffs.vol_E, 3 * np.pi),
                               ("fbar_O", coeffs.fbar_O, 2 / 9)):
            err = abs(got - ref) / abs(ref)
            res.check(f"closed_form_{name}", err <= tol, f"{float(got)!r} vs {ref!r} (rel {err:.1e})")
    res.summary.append(f"p = {list(coeffs.p)}, Vol(E) = {coeffs.vol_E!r}, fbar(O) = {coeffs.fbar_O!r}")
    return res


def exp_occupation(cfg, model, coeffs):
    res = ExperimentResult()
    p = cfg.params
    x0 = np.asarray(p["x0"] if p["x0"] is not None else model.x_O, dtype=float)
    target = coeffs.vol_E / coeffs.total_volume()
    gen = build_generator(coeffs, int(p["n_cells"]))
    pi = stationary(gen)
    res.check("ctmc_stationary_root", abs(pi[0] - target) <= p["stationary_tol"],
              f"P(O)={float(pi[0])!r} target {float(target)!r}")
    rows, paths = [], []
    for eps in cfg.eps:
        sc = cfg.sim_config(eps)
        occ = simulate_occupation(model, sc, x0)
        ok = abs(occ.mean - target) <= p["tol"]
        rows.append((eps, sc.dt, sc.T, sc.n_paths, occ.mean, occ.stderr, target, ok))
        paths.extend((eps, i, f) for i, f in enumerate(occ.fractions))
        res.check(f"occupation_eps={eps:g}", ok, f"{occ.mean:.4f} +- {occ.stderr:.4f} vs {target:.4f}")
    res.tables["occupation"] = (["eps", "dt", "T", "n_paths", "mean", "stderr", "target", "pass"], rows)
    res.tables["occupation_paths"] = (["eps", "path", "fraction"], paths)
    return res


def exit_levels(eps):
    """``(gamma_minus, gamma, gamma_plus, gamma_plus_plus)`` as levels of ``H_ext``."""
    return -math.sqrt(eps), 0.0, eps ** 0.25, 2 * eps ** 0.25


def exp_exit_times(cfg, model, coeffs):
    res = ExperimentResult()
    p = cfg.params
    rows = []
    a_mean, b_prob, c_mean = [], [], []
    for eps in cfg.eps:
        sc = cfg.sim_config(eps)
        gm, g0, gp, gpp = exit_levels(eps)
        start_p = model.level_points(gp, sc.n_paths)
        a = estimate_exit_time(model, sc, start_p, [g0, gpp])
        start_0 = model.level_points(g0, sc.n_paths)
        c = estimate_exit_time(model, sc, start_0, [gm, gp])
        pg = a.probability(g0)
        pg_se = math.sqrt(pg * (1 - pg) / max(a.count, 1))
        rows.append((eps, "gamma+ -> {gamma, gamma++}", a.mean, a.stderr, a.count, a.n_censored, pg, pg_se))
        rows.append((eps, "gamma -> {gamma-, gamma+}", c.mean, c.stderr, c.count, c.n_censored,
                     c.probability(gm), float("nan")))
        a_mean.append(a.mean)
        b_prob.append(pg)
        c_mean.append(c.mean)
        for st, nm in ((a, "a"), (c, "c")):
            res.check(f"censoring_{nm}_eps={eps:g}", st.n_censored == 0, f"{st.n_censored} censored")
    res.tables["exit_times"] = (["eps", "transit", "mean", "stderr", "count", "censored", "p_first",
                                 "p_first_stderr"], rows)
    sa, _ = fit_loglog(cfg.eps, a_mean)
    sb, _ = fit_loglog(cfg.eps, b_prob) if all(v > 0 for v in b_prob) else (float("nan"), None)
    sc_, _ = fit_loglog(cfg.eps, c_mean)
    fits = {"transit_slope": sa, "hit_gamma_slope": sb, "gamma_minus_slope": sc_,
            "eps": cfg.eps, "transit_mean": a_mean, "hit_gamma_probability": b_prob,
            "gamma_minus_mean": c_mean}
    res.documents["exit_fits"] = fits
    res.check("transit_slope", sa >= p["min_slope_transit"], f"slope {sa:.3f} >= {p['min_slope_transit']}")
    res.check("hit_gamma_slope", sb <= p["max_slope_hit"], f"slope {sb:.3f} <= {p['max_slope_hit']}")
    res.check("gamma_minus_vanishing", _monotone_decreasing(c_mean) and sc_ > 0,
              f"means {[round(float(v), 5) for v in c_mean]}, slope {sc_:.3f}")
    res.tables["exit_fit_a"] = (["eps", "mean_transit"], list(zip(cfg.eps, a_mean)))
    res.tables["exit_fit_b"] = (["eps", "p_hit_gamma"], list(zip(cfg.eps, b_prob)))
    res.plots.append(("exit_fit_a", {"x": "eps", "y": "mean_transit", "logx": True, "logy": True,
                                     "fit": True, "title": "mean transit time from gamma+"}))
    res.plots.append(("exit_fit_b", {"x": "eps", "y": "p_hit_gamma", "logx": True, "logy": True,
                                     "fit": True, "title": "P(hit gamma before gamma++)"}))
    return res


def exp_marginals(cfg, model, coeffs):
    res = ExperimentResult()
    p = cfg.params
    x0 = np.asarray(p["x0"], dtype=float)
    gen = build_generator(coeffs, int(p["n_cells"]))
    y0 = identify(model, x0)
    rows, bins = [], []
    tvs = []
    T = float(cfg.sim["T"])
    ref = gen.histogram(marginal_at(gen, y0, T), int(p["n_bins"]))
    for eps in cfg.eps:
        sc = cfg.sim_config(eps)
        emp = empirical_marginal(model, sc, x0, T, int(p["n_bins"]))
        tv = emp.tv_distance(ref)
        tvs.append(tv)
        rows.append((eps, T, sc.n_paths, tv, emp.root_mass, ref.root_mass))
        for (k, lo, hi, m_emp), (_, _, _, m_ref) in zip(emp.rows(), ref.rows()):
            bins.append((eps, k, lo, hi, m_emp, m_ref))
    res.tables["marginals"] = (["eps", "t", "n_paths", "tv", "root_mass", "root_mass_ctmc"], rows)
    res.tables["marginal_bins"] = (["eps", "k", "h_lo", "h_hi", "mass", "mass_ctmc"], bins)
    res.check("tv_monotone", _monotone_decreasing(tvs), f"tv {[round(float(v), 5) for v in tvs]}")
    res.check("tv_final", tvs[-1] <= p["tv_max"], f"tv {tvs[-1]:.4f} <= {p['tv_max']}")
    res.plots.append(("marginals", {"x": "eps", "y": "tv", "logx": True, "logy": False, "fit": False,
                                    "title": "TV distance to the graph chain"}))
    return res


def exp_bvp(cfg, model, coeffs):
    res = ExperimentResult()
    p = cfg.params
    y_O = identify(model, model.x_O)
    sol = solve_bvp(coeffs, y_O)
    fd = solve_bvp_fd(coeffs, y_O, int(p["fd_n"]))
    diff = max(abs(evaluate(sol, GraphPoint(k, h)) - v)
               for k in range(1, coeffs.edge_count + 1) for h, v in zip(fd.h[k - 1], fd.v[k - 1]))
    res.tables["bvp_solution"] = (["k", "h", "v", "flux"], sol.rows())
    res.documents["bvp_solution"] = json.loads(sol.to_json())
    res.check("gluing", abs(sol.gluing_residual) <= p["gluing_tol"], f"residual {sol.gluing_residual:.2e}")
    res.check("fd_oracle", diff <= p["oracle_tol"], f"max |v - v_fd| = {diff:.2e}")
    res.check("normalization", abs(evaluate(sol, y_O)) <= 1e-12, f"v(x_O) = {evaluate(sol, y_O):.1e}")
    res.summary.append(f"v(O) = {sol.v_O!r}; v'(0-) = {[float(f[-1] / q) for f, q in zip(sol.flux, coeffs.p)]}")
    return res


def exp_compare(cfg, model, coeffs):
    res = ExperimentResult()
    p = cfg.params
    probes = np.asarray(p["probes"], dtype=float)
    sol = solve_bvp(coeffs, identify(model, model.x_O))
    vref = np.array([evaluate(sol, identify(model, x)) for x in probes])
    rows, ladder = [], []
    for eps in cfg.eps:
        sc = cfg.sim_config(eps)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fk = feynman_kac_many(model, sc, probes, t_max=float(p["t_max"]), n_windows=int(p["n_windows"]),
                                  max_doublings=int(p["max_doublings"]))
        err = np.abs(fk.value - vref)
        i = int(np.argmax(err))
        for j, x in enumerate(probes):
            rows.append((eps, x[0], x[1], fk.value[j], fk.stderr[j], vref[j], err[j], fk.decayed[j],
                         fk.tail_slope[j]))
        ladder.append((eps, err[i], fk.stderr[i], probes[i][0], probes[i][1], fk.t_max, not fk.warning))
        res.check(f"mixing_eps={eps:g}", not fk.warning, f"t_max={fk.t_max}")
    res.tables["compare"] = (["eps", "x1", "x2", "u_hat", "stderr", "v", "abs_err", "tail_decayed",
                              "tail_slope"], rows)
    res.tables["compare_ladder"] = (["eps", "max_abs_err", "stderr_at_max", "x1_at_max", "x2_at_max",
                                     "t_max", "mixed"], ladder)
    errs = [r[1] for r in ladder]
    res.check("max_err_monotone", _monotone_decreasing(errs), f"max errors {[round(float(e), 4) for e in errs]}")
    bound = 2 * ladder[-1][2] + p["band"]
    res.check("max_err_final", errs[-1] <= bound, f"{errs[-1]:.4f} <= 2 SE + {p['band']} = {bound:.4f}")
    res.documents["compare_probes"] = {"probes": probes.tolist(), "v": vref.tolist()}
    res.plots.append(("compare_ladder", {"x": "eps", "y": "max_abs_err", "logx": True, "logy": True,
                                         "fit": True, "title": "max |u_eps - v| over probes"}))
    return res


RUNNERS = {"coefficients": exp_coefficients, "occupation": exp_occupation, "exit-times": exp_exit_times,
           "marginals": exp_marginals, "bvp": exp_bvp, "compare": exp_compare}


def run_experiment(cfg):
    """Run one experiment in memory; returns ``(model, coeffs, ExperimentResult)``."""
    model = build_model(cfg.model)
    n = int(cfg.params.get("n", 512))
    coeffs = compute_coefficients(model, n=n)
    return model, coeffs, RUNNERS[cfg.experiment](cfg, model, coeffs)


def _versions():
    import numba
    import scipy

    return {"graphlimit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pyyaml": yaml.__version__}


def _error(out, kind, message, code):
    doc = {"status": "error", "kind": kind, "message": message, "exit_code": code}
    text = _json(doc)
    try:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "error.json").write_text(text, encoding="utf-8")
    except OSError:
        pass
    sys.stderr.write(text)
    return code


EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def run(config_path, out=None, workers=None):
    """Run the experiment described by ``config_path``; returns the exit code."""
    out_guess = out or "."
    try:
        cfg = load_config(config_path, out, workers)
    except ConfigError as exc:
        return _error(out_guess, "config", str(exc), EXIT_CONFIG)
    outdir = Path(cfg.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        return _error(out_guess, "config", f"output directory not writable: {exc}", EXIT_CONFIG)
    t0 = time.perf_counter()
    try:
        model, coeffs, res = run_experiment(cfg)
    except Exception as exc:  # reported as machine-readable error
        return _error(outdir, "runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    wall = time.perf_counter() - t0
    for name, (header, rows) in res.tables.items():
        if cfg.experiment in SIMULATION:
            # RNG provenance travels with every row of a sampled table
            header = list(header) + ["seed", "rng"]
            rows = [tuple(r) + (cfg.sim["seed"], RNG_ALGORITHM) for r in rows]
        write_csv(outdir / f"{name}.csv", header, rows)
    for name, doc in res.documents.items():
        (outdir / f"{name}.json").write_text(_json(doc), encoding="utf-8")
    checks = [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in res.checks]
    (outdir / "checks.json").write_text(_json({"passed": res.passed, "checks": checks}), encoding="utf-8")
    manifest = {"experiment": cfg.experiment, "config": cfg.raw, "seed": cfg.sim["seed"],
                "rng": RNG_ALGORITHM, "versions": _versions(), "wall_clock_s": round(wall, 3),
                "workers": cfg.workers, "platform": platform.platform(), "artifacts": sorted(
                    [f"{n}.csv" for n in res.tables] + [f"{n}.json" for n in res.documents])}
    if cfg.experiment == "compare":
        manifest["probes"] = np.asarray(cfg.params["probes"], float).tolist()
    (outdir / "manifest.json").write_text(_json(manifest), encoding="utf-8")
    lines = [f"experiment: {cfg.experiment}", f"eps: {cfg.eps}", ""]
    lines += res.summary
    lines += [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in res.checks]
    lines.append(f"overall: {'PASS' if res.passed else 'FAIL'}")
    (outdir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if cfg.plots:
        for table, spec in res.plots:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", UserWarning)
                    plot(outdir / f"{table}.csv", dict(spec, out=str(outdir / f"{table}.svg")))
            except (ValueError, KeyError) as exc:
                sys.stderr.write(f"plot {table} skipped: {exc}\n")
    print("\n".join(lines))
    return EXIT_OK if res.passed else EXIT_FAILED


# ---------------------------------------------------------------------------
# plotting


def plot(csv_path, spec):
    """Deterministic SVG line/scatter plot of two CSV columns.

    ``spec`` keys: ``x``, ``y`` (column names), optional ``out``, ``logx``,
    ``logy``, ``fit`` (least-squares line, log-log when both axes are
    logarithmic), ``title``.  Returns ``(svg path, slope or None)``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise FileNotFoundError(f"{csv_path} does not exist")
    header, rows = read_csv(csv_path)
    for col in (spec["x"], spec["y"]):
        if col not in header:
            raise KeyError(f"column {col!r} not in {csv_path.name} (columns: {header})")
    x = np.array([float(r[spec["x"]]) for r in rows])
    y = np.array([float(r[spec["y"]]) for r in rows])
    out = Path(spec.get("out") or csv_path.with_suffix(".svg"))
    logx, logy = bool(spec.get("logx")), bool(spec.get("logy"))
    slope = None
    with matplotlib.rc_context({"svg.hashsalt": "graphlimit", "svg.fonttype": "none",
                                "font.family": "DejaVu Sans", "font.size": 10}):
        fig, ax = plt.subplots(figsize=(5.0, 3.6), dpi=100)
        ax.plot(x, y, "o-", color="C0", label=spec["y"])
        if spec.get("fit"):
            if len(x) < 2:
                warnings.warn("single data row: plotting without fit", UserWarning, stacklevel=2)
            else:
                fx = np.log(x) if logx else x
                fy = np.log(y) if logy else y
                slope, icpt = np.polyfit(fx, fy, 1)
                xs = np.linspace(fx.min(), fx.max(), 50)
                ys = slope * xs + icpt
                ax.plot(np.exp(xs) if logx else xs, np.exp(ys) if logy else ys, "--", color="C1",
                        label=f"fit slope {slope:.3f}")
                slope = float(slope)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(spec["x"])
        ax.set_ylabel(spec["y"])
        if spec.get("title"):
            ax.set_title(spec["title"])
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out, slope
