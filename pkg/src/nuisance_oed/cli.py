"""Command-line runner: design sweeps, breakdown scans, allocation tables, consistency checks and pilots.

Every command reads one YAML config, writes ``<command>.csv`` (numbers only,
reproducible byte for byte) and ``<command>.json`` (the same rows plus the
config hash, timestamps and version) into ``--out``, and by default a PNG
figure next to them.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__, allocation, estimators, models, plotting
from .config import RunConfig, analytic_reference, build_model, build_spec, load_config
from .core import RngStream
from .errors import NotPD, OEDError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
PILOT_KEY = 1_000_000
REFERENCE_KEY = 2_000_000


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def run_estimator(cfg: RunConfig, model, spec, stream, workers=None, n_outer=None, n_inner=None):
    e = cfg.estimator
    n = e.n_outer if n_outer is None else int(n_outer)
    m = e.n_inner if n_inner is None else int(n_inner)
    if e.name == "mcla":
        return estimators.mcla(model, spec, n, stream, workers=workers, use_map=e.use_map)
    if e.name == "dlmc2":
        return estimators.dlmc_two_loops(model, spec, n, m, e.n_inner2, stream, workers=workers)
    return estimators.ESTIMATORS[e.name](model, spec, n, m, stream, workers=workers)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _diag_cols(est):
    d = est.diagnostics
    return {"pd_failures": d.get("pd_failures", 0), "underflow_guards": d.get("underflow_guards", 0),
            "map_failures": d.get("map_failures", 0)}


def _design_cols(point):
    if point is None:
        return {}
    if isinstance(point, (tuple, list)):
        return {f"design_{i + 1}": float(p) for i, p in enumerate(point)}
    return {"design_1": float(point)}


# ------------------------------------------------------------------ commands

def run_sweep(cfg: RunConfig, workers=None):
    if cfg.sweep is None:
        raise ConfigError("the sweep command needs a 'sweep' section")
    points = cfg.sweep.points
    want_pairs = cfg.model.name == "eit"
    if cfg.model.name == "example1":
        raise ConfigError("example1 has no design parameter to sweep")
    if any(isinstance(p, (tuple, list)) != want_pairs for p in points):
        raise ConfigError("sweep points must be (shift, spacing) pairs for eit and scalars for example2")
    rows = []
    for i, point in enumerate(points):
        stream = RngStream(cfg.seed, (i,))
        row = {**_design_cols(point), "seed": cfg.seed, "stream": stream.label}
        try:
            model = build_model(cfg, point)
            spec = build_spec(cfg, point)
            est = run_estimator(cfg, model, spec, stream, workers)
            row.update(status="ok", eig=est.value, std_err=est.std_error, n_outer=est.n_outer,
                       n_inner=_fmt_inner(est.n_inner), **_diag_cols(est))
            row["analytic"] = analytic_reference(cfg, spec, point)
        except OEDError as exc:
            row.update(status=type(exc).__name__)
        rows.append(row)
    cols = list(_design_cols(points[0]).keys()) + ["eig", "std_err", "analytic", "n_outer", "n_inner",
                                                   "pd_failures", "underflow_guards", "map_failures",
                                                   "status", "seed", "stream"]
    return rows, cols, {"n_points": len(rows), "n_failed": sum(r["status"] != "ok" for r in rows)}


def _fmt_inner(n_inner):
    if isinstance(n_inner, tuple):
        return "x".join(str(x) for x in n_inner)
    return n_inner


def run_breakdown(cfg: RunConfig, workers=None):
    if cfg.breakdown is None:
        raise ConfigError("the breakdown command needs a 'breakdown' section")
    grid = cfg.breakdown.nuisance_vars.values()
    model = build_model(cfg)
    rows, first = [], []
    for run in range(cfg.breakdown.n_runs):
        stream = RngStream(cfg.seed, (run,))
        first_fail = None
        for v in grid:
            row = {"run": run, "nuisance_var": float(v), "seed": cfg.seed, "stream": stream.label}
            try:
                est = run_estimator(cfg, model, build_spec(cfg, nuisance_var=float(v)), stream, workers)
                row.update(status="ok", eig=est.value, std_err=est.std_error, **_diag_cols(est))
            except NotPD as exc:
                row.update(status="not_pd", min_eigenvalue=exc.min_eigenvalue)
                if first_fail is None:
                    first_fail = float(v)
            except OEDError as exc:
                row.update(status=type(exc).__name__)
            rows.append(row)
        first.append(first_fail)
    cols = ["run", "nuisance_var", "eig", "std_err", "status", "min_eigenvalue", "pd_failures",
            "underflow_guards", "map_failures", "seed", "stream"]
    seen = [f for f in first if f is not None]
    summary = {"first_not_pd": first, "median_first_not_pd": float(np.median(seen)) if seen else None}
    return rows, cols, summary


def reference_value(cfg: RunConfig, ref_cfg, model, spec, workers=None):
    if ref_cfg.kind == "value":
        return float(ref_cfg.value)
    if ref_cfg.kind == "analytic":
        val = analytic_reference(cfg, spec)
        if val is None:
            raise ConfigError("no closed-form reference for this model; use kind 'value' or 'dlmcis'")
        return val
    est = estimators.dlmcis(model, spec, ref_cfg.n_outer, ref_cfg.n_inner, RngStream(cfg.seed, (REFERENCE_KEY,)),
                            workers=workers)
    return est.value


def compute_pilots(cfg: RunConfig, pcfg, model, spec, workers=None):
    """Pilot constants per method, plus the reference EIG used by the Laplace pilot (or ``None``)."""
    base = allocation.PilotConstants(eta=model.eta, gamma=model.gamma)
    if model.mesh_param is not None:
        base = base.merged(**_mesh_constants(cfg, spec))
    out, ref = {}, None
    for k, method in enumerate(pcfg.methods):
        stream = RngStream(cfg.seed, (PILOT_KEY, k))
        if method == "mcla":
            if ref is None:
                ref = reference_value(cfg, pcfg.reference, model, spec, workers)
            out[method] = allocation.pilot_mcla(model, spec, pcfg.n_outer, stream, ref, workers, base)
        else:
            out[method] = allocation.pilot_dlmc(model, spec, pcfg.n_outer, pcfg.n_inner, stream,
                                                importance=(method == "dlmcis"), workers=workers, base=base)
    return out, ref


def _mesh_constants(cfg: RunConfig, spec):
    """Mesh-error constant and rate from three refinements against a fine reference."""
    h = cfg.model.h
    thetas = spec.prior.sample(RngStream(cfg.seed, (PILOT_KEY, 99)).generator(), 4)
    rate = allocation.estimate_h_constant(lambda hh: models.make_eit(cfg.model.design, hh, cfg.model.current_pattern),
                                          [h, h / 2, h / 4], h / 8, thetas)
    return {"c_dl3": rate.c3, "c_la3": rate.c3, "eta": rate.eta_hat}


def _setting_row(method, s):
    return {"method": method, "tol": s.tol, "n_star": s.n_star if s.feasible else None,
            "m_star": s.m_star, "h_star": s.h_star, "kappa_star": s.kappa_star, "feasible": s.feasible,
            "predicted_work": s.predicted_work if s.feasible else None, "n_raw": s.n_raw if s.feasible else None,
            "m_raw": s.m_raw, "m_pinned": s.m_pinned}


def run_allocate(cfg: RunConfig, workers=None):
    if cfg.allocate is None:
        raise ConfigError("the allocate command needs an 'allocate' section")
    model, spec = build_model(cfg), build_spec(cfg)
    pilots, ref = compute_pilots(cfg, cfg.allocate.pilot, model, spec, workers)
    rows = []
    for method, consts in pilots.items():
        for tol in cfg.allocate.tol_values():
            s = allocation.allocate(method, consts, float(tol), cfg.c_alpha, spec.n_exp)
            rows.append({**_setting_row(method, s), "seed": cfg.seed})
    cols = ["method", "tol", "n_star", "m_star", "h_star", "kappa_star", "feasible", "predicted_work",
            "n_raw", "m_raw", "m_pinned", "seed"]
    summary = {"pilots": {m: vars(c) for m, c in pilots.items()}, "reference": ref}
    return rows, cols, summary


def binomial_threshold(n_rep, level=0.95, z=1.645):
    return level - z * math.sqrt(level * (1.0 - level) / n_rep)


def run_consistency(cfg: RunConfig, workers=None):
    if cfg.consistency is None:
        raise ConfigError("the consistency command needs a 'consistency' section")
    method = cfg.estimator.name
    if method not in ("dlmc", "dlmcis", "mcla"):
        raise ConfigError("consistency needs estimator dlmc, dlmcis or mcla")
    cc = cfg.consistency
    model, spec = build_model(cfg), build_spec(cfg)
    ref = reference_value(cfg, cc.pilot.reference, model, spec, workers)
    pcfg = cc.pilot.model_copy(update={"methods": [method]})
    consts = compute_pilots(cfg, pcfg, model, spec, workers)[0][method]
    # settle every setting first: an unreachable tolerance refuses the whole run before any sampling
    settings = [allocation.optimal_setting_mcla(consts, tol, cfg.c_alpha, spec.n_exp) if method == "mcla"
                else allocation.optimal_setting_dlmc(consts, tol, cfg.c_alpha, method) for tol in cc.tols]
    rows, per_tol = [], []
    thr = binomial_threshold(cc.n_rep)
    for j, (tol, s) in enumerate(zip(cc.tols, settings)):
        hits = 0
        for r in range(cc.n_rep):
            stream = RngStream(cfg.seed, (j, r))
            est = run_estimator(cfg, model, spec, stream, workers, s.n_star, s.m_star or 1)
            err = abs(est.value - ref)
            hits += err <= tol
            rows.append({"tol": tol, "rep": r, "n_outer": s.n_star, "n_inner": s.m_star, "estimate": est.value,
                         "reference": ref, "abs_error": err, "within_tol": err <= tol, "seed": cfg.seed,
                         "stream": stream.label})
        frac = hits / cc.n_rep
        per_tol.append({"tol": tol, "status": "ok", "fraction": frac, "threshold": thr, "passed": frac >= thr,
                        "n_star": s.n_star, "m_star": s.m_star})
    cols = ["tol", "rep", "n_outer", "n_inner", "estimate", "reference", "abs_error", "within_tol", "seed", "stream"]
    return rows, cols, {"reference": ref, "per_tol": per_tol, "pilot": vars(consts)}


def run_pilot(cfg: RunConfig, workers=None):
    pcfg = cfg.pilot or allocation_default_pilot()
    model, spec = build_model(cfg), build_spec(cfg)
    pilots, ref = compute_pilots(cfg, pcfg, model, spec, workers)
    rows = [{"method": m, **vars(c), "seed": cfg.seed, "stream": f"{PILOT_KEY}/{k}"}
            for k, (m, c) in enumerate(pilots.items())]
    cols = ["method", "c_dl1", "c_dl2", "c_dl4", "c_la1", "c_la2", "c_dl3", "c_la3", "eta", "gamma", "seed", "stream"]
    return rows, cols, {"reference": ref}


def allocation_default_pilot():
    from .config import PilotConfig
    return PilotConfig()


COMMANDS = {
    "sweep": (run_sweep, plotting.plot_sweep),
    "breakdown": (run_breakdown, plotting.plot_breakdown),
    "allocate": (run_allocate, plotting.plot_allocation),
    "consistency": (run_consistency, plotting.plot_consistency),
    "pilot": (run_pilot, None),
}


# ---------------------------------------------------------------------- click

def _resolve(cfg: RunConfig, seed, workers):
    env_seed, env_workers = os.environ.get("OED_SEED"), os.environ.get("OED_WORKERS")
    try:
        if seed is None and env_seed:
            seed = int(env_seed)
        if workers is None and env_workers:
            workers = int(env_workers)
    except ValueError:
        raise ConfigError("OED_SEED and OED_WORKERS must be integers") from None
    update = {}
    if seed is not None:
        update["seed"] = seed
    if workers is not None:
        update["workers"] = workers
    if update:
        cfg = RunConfig.model_validate({**cfg.model_dump(), **update})
    return cfg


def execute(command, config_path, seed=None, workers=None, out=None, figures=True):
    """Run one command end to end; returns the output directory."""
    started = dt.datetime.now(dt.timezone.utc)
    try:
        cfg = _resolve(load_config(config_path), seed, workers)
    except (OSError, yaml.YAMLError, ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    runner, plotter = COMMANDS[command]
    rows, cols, summary = runner(cfg, cfg.workers)
    out = Path(out or "results")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"{command}.csv", rows, cols)
    record = {
        "command": command,
        "config_hash": cfg.payload_hash(),
        "version": artifact_version(),
        "started": started.isoformat(),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "config": cfg.model_dump(mode="json"),
        "summary": summary,
        "rows": rows,
    }
    (out / f"{command}.json").write_text(json.dumps(_jsonable(record), indent=2))
    if figures and plotter is not None and rows:
        extra = {}
        if command == "breakdown":
            extra = {"first_failures": summary["first_not_pd"], "c_alpha": cfg.c_alpha}
        elif command == "sweep":
            extra = {"c_alpha": cfg.c_alpha}
        plotter(rows, out / f"{command}.png", **extra)
    return out


def artifact_version():
    return f"nuisance-oed {__version__}"


def _command(name, help_text):
    @click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                  help="YAML run configuration.")
    @click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Root seed (overrides OED_SEED).")
    @click.option("--workers", type=click.IntRange(1), default=None, help="Worker processes (overrides OED_WORKERS).")
    @click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True,
                  help="Output directory.")
    @click.option("--no-figures", is_flag=True, help="Skip the PNG figure.")
    def cmd(config_path, seed, workers, out, no_figures):
        try:
            path = execute(name, config_path, seed, workers, out, not no_figures)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except OEDError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        click.echo(f"wrote {path / (name + '.csv')}")

    cmd.__doc__ = help_text
    return main.command(name)(cmd)


@click.group()
@click.version_option(__version__, prog_name="nuisance-oed")
def main():
    """Expected information gain of experimental designs under nuisance uncertainty."""


_command("sweep", "EIG over a grid of designs.")
_command("breakdown", "EIG against a log grid of nuisance variances, marking where the correction fails.")
_command("allocate", "Optimal sample sizes over a tolerance grid from pilot constants.")
_command("consistency", "Error against tolerance at the optimal setting, with a coverage verdict.")
_command("pilot", "Pilot estimates of the allocation constants.")


if __name__ == "__main__":
    main()
