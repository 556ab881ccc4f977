"""Command line experiment runner.

``pdjump run config.json`` validates a JSON experiment definition, runs it and
writes ``manifest.json``, ``<kind>.csv`` (plus kind-specific extras) and
``summary.txt`` into the output directory.  ``pdjump plots DIR`` turns those
artifacts into tidy per-figure CSVs and, unless ``--no-figures`` is given,
PNG figures.

Exit codes: 0 success, 2 a declared check failed, 1 any error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .core import BoxSet, LyapunovSpec, ModelError
from .simulate import SimConfig, simulate_inhomogeneous, simulate_limit

ENV_OUT = "PDJUMP_OUT"


class ConfigError(ValueError):
    """The experiment definition is malformed."""


class ArtifactError(RuntimeError):
    """Expected experiment artifacts are missing."""


# ---------------------------------------------------------------------------
# config


KINDS: dict[str, dict[str, Any]] = {
    "simulate": dict(target="limit", paths=100, dt=0.01, horizon=1.0, t_start=0.0, x0=None, level=None,
                     tail_mode="drift", record_every=0),
    "couple": dict(level=1, center=None, z0=None, r=0.05, R=0.8, x=None, y=None, pairs=1000, dt=0.005,
                   horizon=40.0, points_per_dim=9, survival_t=[10.0, 40.0]),
    "minorize": dict(level=1, center=None, z0=None, r=0.05, R=0.8, points_per_dim=9, verify_points=33),
    "lyapunov": dict(target="limit", grid_lo=None, grid_hi=None, grid_points=41, K_lo=None, K_hi=None,
                     t_grid=[0.0]),
    "regimes": dict(x_grid=[0.5, 1.0, 2.0], t_grid=[8.0, 10.0, 12.0, 14.0]),
    "pseudotrajectory": dict(x0=None, t_list=[2.0, 8.0], T=2.0, s_grid=None, paths=10_000, dt=0.01, level=1,
                             tail_mode="aggregate", limit_level=None, limit_tail_mode="drift", dictionary_size=64),
    "equilibrium": dict(x0=None, reference_x0=None, burn_in=50.0, t_list=[5.0, 10.0, 20.0, 40.0], paths=20_000,
                        dt=0.05, estimator="tv"),
    "control": dict(level=None, K_lo=None, K_hi=None, K_points=5, x0=None, eta=0.5, paths=2000, dt=0.01),
    "seminorms": dict(T=1.0, t0=0.0, box_lo=None, box_hi=None, grid_points=9, p=12, q=3, t_grid=None),
}

CHECKS: dict[str, dict[str, Any]] = {
    "simulate": {"finite": True},
    "couple": {"decay_factor": None, "max_ci_width": None},
    "minorize": {"zero_violations": True},
    "lyapunov": {"verified": True},
    "regimes": {"slope_rel_tol": None},
    "pseudotrajectory": {"decreasing": True},
    "equilibrium": {"monotone": True, "min_exponent": None},
    "control": {"positive": True},
    "seminorms": {"finite_q3": False},
}

POSITIVE = {"paths", "pairs", "dt", "horizon", "r", "R", "T", "burn_in", "eta", "grid_points", "points_per_dim",
            "verify_points", "K_points", "dictionary_size", "p", "q"}

TOP_KEYS = {"model", "kind", "seed", "settings", "checks", "output"}


def _reject_unknown(given: dict, allowed, where: str) -> None:
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _dataclass(cls, values: dict, where: str, nested: Optional[dict] = None):
    names = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(values, names, where)
    kw = dict(values)
    for key, sub in (nested or {}).items():
        if key in kw and isinstance(kw[key], dict):
            kw[key] = _dataclass(sub, kw[key], f"{where}.{key}")
    try:
        return cls(**kw)
    except (TypeError, ModelError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclasses.dataclass
class ExperimentConfig:
    model: dict
    kind: str
    seed: int
    settings: dict
    checks: dict
    output: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(raw, TOP_KEYS, "config")
        for key in ("model", "kind"):
            if key not in raw:
                raise ConfigError(f"config is missing '{key}'")
        kind = raw["kind"]
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind '{kind}' (expected one of {', '.join(KINDS)})")
        model = raw["model"]
        if not isinstance(model, dict) or "name" not in model:
            raise ConfigError("model must be an object with a 'name'")
        _reject_unknown(model, {"name", "params", "variant"}, "model")
        if model["name"] not in ("cir", "hawkes"):
            raise ConfigError(f"unknown model '{model['name']}' (expected cir or hawkes)")
        settings = dict(KINDS[kind])
        given = raw.get("settings", {})
        _reject_unknown(given, settings, f"settings for '{kind}'")
        settings.update(given)
        for key in POSITIVE & set(settings):
            v = settings[key]
            if v is not None and (not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0):
                raise ConfigError(f"setting '{key}' must be a positive number (got {v!r})")
        checks = dict(CHECKS[kind])
        _reject_unknown(raw.get("checks", {}), checks, f"checks for '{kind}'")
        checks.update(raw.get("checks", {}))
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        return cls(dict(model), kind, seed, settings, checks, raw.get("output"))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# models


@dataclasses.dataclass
class _Built:
    name: str
    params: Any
    inhomogeneous: Any
    limit: Any
    system: Any = None


def build_models(spec: dict) -> _Built:
    from .models import (CirParams, HawkesParams, Logistic, make_cir_models, make_hawkes_limit,
                         make_hawkes_system)

    params = spec.get("params", {})
    if spec["name"] == "cir":
        if "variant" in spec:
            raise ConfigError("model 'cir' has no variant")
        p = _dataclass(CirParams, params, "model.params", {"f": Logistic})
        inh, lim = make_cir_models(p)
        return _Built("cir", p, inh, lim)
    p = _dataclass(HawkesParams, params, "model.params", {"f1": Logistic, "f2": Logistic})
    try:
        system = make_hawkes_system(p)
        lim = make_hawkes_limit(p, spec.get("variant", "reset_zero"))
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc
    return _Built("hawkes", p, system.model(), lim, system)


def _point(value, d: int, default: float = 0.0) -> np.ndarray:
    if value is None:
        return np.full(d, default)
    v = np.atleast_1d(np.asarray(value, dtype=float))
    if v.shape != (d,):
        raise ConfigError(f"expected a point with {d} coordinate(s), got {value!r}")
    return v


def _box(lo, hi, d: int, default: tuple) -> BoxSet:
    return BoxSet(_point(lo, d, default[0]), _point(hi, d, default[1]))


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _coords(prefix: str, d: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(d)]


# ---------------------------------------------------------------------------
# experiments
#
# Each runner returns (summary lines, {check name: (passed, message)}).


def _sim_config(s: dict, seed: int, threads: int, **kw) -> SimConfig:
    return SimConfig(dt=s["dt"], seed=seed, threads=threads, **kw)


def _run_simulate(cfg, m: _Built, out: Path, threads: int):
    s = cfg.settings
    model = m.limit if s["target"] == "limit" else m.inhomogeneous
    if s["target"] not in ("limit", "inhomogeneous"):
        raise ConfigError("simulate target must be 'limit' or 'inhomogeneous'")
    d = model.dim_state
    x0 = _point(s["x0"], d, 1.0 if m.name == "cir" else 0.0)
    sc = _sim_config(s, cfg.seed, threads, horizon=s["horizon"], n_paths=s["paths"], level=s["level"],
                     tail_mode=s["tail_mode"], record_every=s["record_every"])
    batch = simulate_limit(model, x0, sc) if s["target"] == "limit" else \
        simulate_inhomogeneous(model, x0, s["t_start"], sc)
    rows = ([i, t, *batch.states[i, k]] for i in range(batch.states.shape[0]) for k, t in enumerate(batch.times))
    write_csv(out / "simulate.csv", ["path", "t", *_coords("x", d)], rows)
    term = batch.terminal
    lines = [f"paths: {term.shape[0]}", f"terminal mean: {term.mean(axis=0).tolist()}",
             f"terminal std: {term.std(axis=0).tolist()}"]
    checks = {}
    if cfg.checks["finite"]:
        checks["finite"] = (bool(np.all(np.isfinite(batch.states))), "all recorded states finite")
    return lines, checks


def _certificate(cfg, m: _Built):
    from .coupling import estimate_minorization

    s = cfg.settings
    d = m.limit.dim_state
    center = _point(s["center"], d, 1.0)
    z0 = _point(s["z0"], m.limit.dim_mark, 1.0)
    return estimate_minorization(m.limit, s["level"], center, z0, s["r"], s["R"], points_per_dim=s["points_per_dim"])


def _cert_row(cert) -> dict:
    return {"level": cert.level, "center": cert.center.tolist(), "eta": cert.eta, "beta": cert.beta,
            "nu_center": cert.nu_center.tolist(), "nu_radius": cert.nu_radius}


def _run_minorize(cfg, m: _Built, out: Path, threads: int):
    from .coupling import verify_certificate

    cert = _certificate(cfg, m)
    ver = verify_certificate(m.limit, cert, points_per_dim=cfg.settings["verify_points"])
    row = _cert_row(cert)
    d = m.limit.dim_state
    write_csv(out / "minorize.csv",
              ["level", *_coords("center", d), "eta", "beta", *_coords("nu_center", d), "nu_radius", "violations",
               "min_ratio"],
              [[row["level"], *row["center"], row["eta"], row["beta"], *row["nu_center"], row["nu_radius"],
                int(ver["violations"]), ver["min_ratio"]]])
    lines = [f"{k}: {v}" for k, v in row.items()] + [f"violations: {ver['violations']}",
                                                    f"min_ratio: {ver['min_ratio']}"]
    checks = {}
    if cfg.checks["zero_violations"]:
        checks["zero_violations"] = (int(ver["violations"]) == 0, f"{ver['violations']} fine-grid violations")
    return lines, checks


def _run_couple(cfg, m: _Built, out: Path, threads: int):
    from .coupling import coupled_simulate, coupling_time_moments, survival

    s = cfg.settings
    d = m.limit.dim_state
    cert = _certificate(cfg, m)
    x = _point(s["x"], d, 0.0)
    y = _point(s["y"], d, 1.0)
    sc = _sim_config(s, cfg.seed, threads, horizon=s["horizon"], n_paths=s["pairs"], record_events=True)
    res = coupled_simulate(m.limit, s["level"], cert, x, y, sc, stop_at_coupling=True)
    res.to_csv(out / "couple.csv")
    write_csv(out / "tau.csv", ["pair", "tau_c"],
              ([i, t if np.isfinite(t) else "inf"] for i, t in enumerate(res.tau)))
    ts = list(s["survival_t"])
    surv = survival(res.tau, ts)
    lines = [f"certificate: {_cert_row(cert)}", f"pairs: {res.tau.size}",
             f"coupled: {int(res.coupled.sum())}"] + [f"P(tau > {t:g}) = {v:.6g}" for t, v in zip(ts, surv)]
    checks = {}
    try:
        mom = coupling_time_moments(res.tau, (1, 2), seed=cfg.seed)
        lines += [f"E tau^{p}: {v[0]:.6g} [{v[1]:.6g}, {v[2]:.6g}]" for p, v in mom.moments.items()]
    except RuntimeError as exc:
        mom = None
        lines.append(f"moments unavailable: {exc}")
    dec = cfg.checks["decay_factor"]
    if dec is not None:
        _reject_unknown(dec, {"t1", "t2", "factor"}, "checks.decay_factor")
        s1, s2 = survival(res.tau, [dec["t1"], dec["t2"]])
        ratio = s1 / s2 if s2 > 0 else float("inf")
        checks["decay_factor"] = (bool(ratio >= dec["factor"]), f"P(tau>{dec['t1']})/P(tau>{dec['t2']}) = {ratio:.4g}")
    width = cfg.checks["max_ci_width"]
    if width is not None:
        w = mom.ci_width(2) if mom is not None else float("inf")
        checks["max_ci_width"] = (bool(w < width), f"relative CI width of E tau^2 = {w:.4g}")
    return lines, checks


def _run_lyapunov(cfg, m: _Built, out: Path, threads: int):
    from .generator import lyapunov_check

    s = cfg.settings
    model = m.limit if s["target"] == "limit" else m.inhomogeneous
    d = model.dim_state
    box = _box(s["grid_lo"], s["grid_hi"], d, (-5.0, 5.0))
    xs = box.grid(s["grid_points"])
    K = _box(s["K_lo"], s["K_hi"], d, (0.0, 4.0) if m.name == "cir" else (-2.0, 2.0))
    spec = LyapunovSpec(V=lambda x: 1.0 + np.sum(np.atleast_2d(x) ** 2, axis=1), K=K)
    res = lyapunov_check(model, spec, xs, t_grid=s["t_grid"] if s["target"] != "limit" else None)
    V = spec.V(xs)
    write_csv(out / "lyapunov.csv", [*_coords("x", d), "V", "LV", "in_K"],
              ([*x, v, lv, k] for x, v, lv, k in zip(xs, V, res.LV, spec.in_K(xs))))
    lines = [f"verified: {res.verified}", f"b: {res.b:.6g}", f"c: {res.c:.6g}",
             f"violations: {len(res.violations)}"]
    checks = {}
    if cfg.checks["verified"]:
        checks["verified"] = (res.verified, f"b = {res.b:.6g}, c = {res.c:.6g}")
    return lines, checks


def _run_regimes(cfg, m: _Built, out: Path, threads: int):
    from .generator import epsilon_decay, regime_functionals

    if m.name != "cir":
        raise ConfigError("regimes experiments need the cir model (the Hawkes system has no t-dependence)")
    s = cfg.settings
    rows = []
    for t in s["t_grid"]:
        for x in s["x_grid"]:
            rf = regime_functionals(m.inhomogeneous, t, np.array([x]), m.limit)
            rows.append([t, x, float(np.ravel(rf.a)[0]), float(np.ravel(rf.b_tilde)[0]), rf.third_moment,
                         rf.second_moment_mid, float(np.ravel(rf.centering)[0]), rf.slow_gap, rf.eps])
    write_csv(out / "regimes.csv", ["t", "x", "a", "b_tilde", "third_moment", "second_moment_mid", "centering",
                                    "slow_gap", "eps"], rows)
    fit = epsilon_decay(m.inhomogeneous, m.limit, np.array(s["x_grid"]), s["t_grid"])
    pooled = np.max(fit.eps / (1.0 + np.linalg.norm(fit.x_grid, axis=1))[:, None], axis=0)
    write_csv(out / "eps_decay.csv", ["t0", "eps"], zip(fit.t_grid, pooled))
    lines = [f"fitted slope: {fit.slope:.6g}", f"fitted constant: {fit.constant:.6g}", f"r: {m.params.r:g}"]
    checks = {}
    tol = cfg.checks["slope_rel_tol"]
    if tol is not None:
        rel = abs(fit.slope + m.params.r) / m.params.r
        checks["slope"] = (bool(rel <= tol), f"slope {fit.slope:.4g} vs -r = {-m.params.r:g} (rel. error {rel:.3g})")
    return lines, checks


def _curve_lines(curve, lines):
    lines += [f"t = {x:g}: gap {g:.6g} [{lo:.6g}, {hi:.6g}]" for x, g, lo, hi in
              zip(curve.x, curve.gap, curve.ci_lo, curve.ci_hi)]
    return lines


def _run_pseudotrajectory(cfg, m: _Built, out: Path, threads: int):
    from .diagnostics import pseudotrajectory_gap

    s = cfg.settings
    d = m.limit.dim_state
    x0 = _point(s["x0"], d, 1.0 if m.name == "cir" else 0.0)
    sc = _sim_config(s, cfg.seed, threads, n_paths=s["paths"], level=s["level"], tail_mode=s["tail_mode"])
    curve = pseudotrajectory_gap(m.inhomogeneous, m.limit, x0, s["t_list"], s["T"], s["s_grid"], sc,
                                 limit_overrides={"level": s["limit_level"], "tail_mode": s["limit_tail_mode"]})
    curve.to_csv(out / "pseudotrajectory.csv")
    lines = _curve_lines(curve, [f"T: {s['T']:g}"])
    checks = {}
    if cfg.checks["decreasing"]:
        checks["decreasing"] = (curve.strictly_decreasing(), "gap CIs strictly decreasing in t")
    return lines, checks


def _run_equilibrium(cfg, m: _Built, out: Path, threads: int):
    from .diagnostics import equilibrium_gap, pi_reference

    s = cfg.settings
    d = m.limit.dim_state
    sc = _sim_config(s, cfg.seed, threads, n_paths=s["paths"])
    ref = pi_reference(m.limit, _point(s["reference_x0"], d, 1.0), sc, burn_in=s["burn_in"])
    curve = equilibrium_gap(m.limit, _point(s["x0"], d, 0.0), s["t_list"], ref, sc.replace(seed=cfg.seed + 1),
                            estimator=s["estimator"])
    curve.to_csv(out / "equilibrium.csv")
    expo = curve.decay_exponent()
    lines = _curve_lines(curve, [f"reference self-test p: {ref.meta['self_test_p']:.4g}",
                                       f"decay exponent: {expo:.6g}"])
    checks = {}
    if cfg.checks["monotone"]:
        checks["monotone"] = (curve.strictly_decreasing(), "gap CIs strictly decreasing in t")
    if cfg.checks["min_exponent"] is not None:
        checks["min_exponent"] = (bool(expo >= cfg.checks["min_exponent"]),
                                  f"decay exponent {expo:.4g} vs required {cfg.checks['min_exponent']:g}")
    return lines, checks


def _run_control(cfg, m: _Built, out: Path, threads: int):
    from .coupling import control_probability

    s = cfg.settings
    d = m.limit.dim_state
    K = _box(s["K_lo"], s["K_hi"], d, (0.0, 2.0))
    pts = K.grid(s["K_points"])
    sc = _sim_config(s, cfg.seed, threads, n_paths=s["paths"])
    res = control_probability(m.limit, s["level"], pts, _point(s["x0"], d, 1.0), s["eta"], sc)
    write_csv(out / "control.csv", [*_coords("x", d), "probability"], ([*x, p] for x, p in zip(res.points, res.estimates)))
    lines = [f"minimum: {res.minimum:.6g} at {res.argmin.tolist()}", f"wilson CI: {list(res.ci)}"]
    checks = {}
    if cfg.checks["positive"]:
        checks["positive"] = (bool(res.ci[0] > 0), f"lower Wilson bound {res.ci[0]:.4g}")
    return lines, checks


def _run_seminorms(cfg, m: _Built, out: Path, threads: int):
    from .generator import seminorm_report

    s = cfg.settings
    d = m.limit.dim_state
    box = _box(s["box_lo"], s["box_hi"], d, (-2.0, 2.0))
    rep = seminorm_report(m.limit, m.inhomogeneous if s["t_grid"] else None, s["T"], s["t0"], box,
                          s["grid_points"], s["t_grid"], p=s["p"], q=s["q"])
    rows = [["theta", rep.theta], ["alpha_p", rep.alpha_p], ["alpha_qp", rep.alpha_qp], ["gamma_q", rep.gamma_q],
            ["q3", rep.q3], ["c_t0", rep.c_t0], ["c_mu", rep.c_mu], ["alpha_tail", rep.alpha_tail]]
    rows += [[f"norm:{k}", v] for k, v in sorted(rep.norms.items()) if np.isscalar(v)]
    write_csv(out / "seminorms.csv", ["name", "value"], rows)
    lines = [f"{k}: {v:.6g}" for k, v in rows] + [f"divergent: {rep.divergent}"]
    checks = {}
    if cfg.checks["finite_q3"]:
        checks["finite_q3"] = (bool(np.isfinite(rep.q3)), f"Q3 = {rep.q3:.6g}")
    return lines, checks


RUNNERS: dict[str, Callable] = {
    "simulate": _run_simulate, "couple": _run_couple, "minorize": _run_minorize, "lyapunov": _run_lyapunov,
    "regimes": _run_regimes, "pseudotrajectory": _run_pseudotrajectory, "equilibrium": _run_equilibrium,
    "control": _run_control, "seminorms": _run_seminorms,
}


def _versions() -> dict:
    import scipy

    return {"pdjump": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def output_dir(cfg: ExperimentConfig, config_path, out: Optional[str]) -> Path:
    if out:
        return Path(out)
    if cfg.output:
        return Path(cfg.output)
    root = Path(os.environ.get(ENV_OUT, "pdjump-out"))
    return root / Path(config_path).stem


def run_experiment(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    """Run one experiment into ``out``; returns the exit code (0 or 2)."""
    out.mkdir(parents=True, exist_ok=True)
    models = build_models(cfg.model)
    lines, checks = RUNNERS[cfg.kind](cfg, models, out, threads)
    manifest = {"config": cfg.as_dict(), "seed": cfg.seed, "versions": _versions()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    failed = [name for name, (ok, _) in checks.items() if not ok]
    body = [f"kind: {cfg.kind}", f"model: {cfg.model['name']}", f"seed: {cfg.seed}", *lines, "", "checks:"]
    body += [f"  {'PASS' if ok else 'FAIL'} {name}: {msg}" for name, (ok, msg) in checks.items()] or ["  (none)"]
    (out / "summary.txt").write_text("\n".join(body) + "\n")
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# plot data


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def emit_plot_data(directory, figures: bool = True) -> list[Path]:
    """Write tidy per-figure CSVs (and PNGs) for the artifacts found in ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise ArtifactError(f"{d} is not a directory")
    written: list[Path] = []
    for name in ("pseudotrajectory.csv", "equilibrium.csv"):
        if (d / name).exists():
            header, rows = _read_csv(d / name)
            idx = [header.index(c) for c in ("x", "gap", "ci_lo", "ci_hi")]
            target = d / "gap_curve.csv"
            write_csv(target, ["t", "gap", "ci_lo", "ci_hi"], ([r[i] for i in idx] for r in rows))
            written.append(target)
    if (d / "tau.csv").exists():
        _, rows = _read_csv(d / "tau.csv")
        tau = np.array([float(r[1]) for r in rows])
        ts = np.sort(tau[np.isfinite(tau)])
        surv = 1.0 - np.arange(1, ts.size + 1) / tau.size
        target = d / "tau_survival.csv"
        write_csv(target, ["t", "survival"], zip(ts, surv))
        written.append(target)
    if (d / "eps_decay.csv").exists():
        _, rows = _read_csv(d / "eps_decay.csv")
        target = d / "epsilon_decay.csv"
        write_csv(target, ["t0", "eps"], ([float(a), float(b)] for a, b in rows))
        written.append(target)
    if not written:
        raise ArtifactError(f"no plottable artifacts in {d}")
    if figures:
        for path in list(written):
            written.append(_figure(path))
    return written


def _figure(csv_path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = _read_csv(csv_path)
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if csv_path.name == "gap_curve.csv":
        ax.errorbar(data[:, 0], data[:, 1], yerr=[data[:, 1] - data[:, 2], data[:, 3] - data[:, 1]], marker="o", capsize=3)
        ax.set_xlabel("t")
        ax.set_ylabel("gap")
        ax.set_yscale("log")
    elif csv_path.name == "tau_survival.csv":
        ax.step(data[:, 0], data[:, 1], where="post")
        ax.set_xlabel("t")
        ax.set_ylabel("P(tau_c > t)")
        ax.set_yscale("log")
    else:
        ax.semilogy(data[:, 0], data[:, 1], marker="o")
        ax.set_xlabel("t0")
        ax.set_ylabel("eps / (1 + |x|)")
    fig.tight_layout()
    target = csv_path.with_suffix(".png")
    fig.savefig(target, dpi=100)
    plt.close(fig)
    return target


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdjump", description="Run pdjump experiments and emit plot data.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    run.add_argument("--out", help=f"output directory (default: ${ENV_OUT}/<config name>)")
    plots = sub.add_parser("plots", help="write tidy plot CSVs (and PNGs) for an output directory")
    plots.add_argument("dir")
    plots.add_argument("--no-figures", action="store_true", help="only write the CSVs")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigError("seed must be nonnegative")
                cfg.seed = args.seed
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            out = output_dir(cfg, args.config, args.out)
            code = run_experiment(cfg, out, args.threads)
            print(f"{cfg.kind}: {'checks passed' if code == 0 else 'check failed'}; artifacts in {out}")
            return code
        for path in emit_plot_data(args.dir, figures=not args.no_figures):
            print(path)
        return 0
    except (ConfigError, ArtifactError, ModelError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
