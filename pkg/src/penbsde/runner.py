"""Experiment orchestration: solve, sweep, reference and validation runs.

Each ``run_*`` function takes an ``ExperimentConfig``, writes its artifacts
under ``cfg.out_dir`` and returns ``(exit_code, report)``. Reports are JSON.
Apart from the ``timings`` block and the echoed ``config``, every report field
is a deterministic function of the resolved config. The worker count and
output directory do not affect it.
"""
from __future__ import annotations

import json
import os
import time
from typing import Optional

import numpy as np

from .bsde import anchor_seed, backward_solve, default_penalty_max, penalty_sweep, probe_anchors
from .config import ExperimentConfig
from .errors import ConfigError
from .forward import TimeGrid, simulate_ensemble
from .model import ControlledModel, make_model
from .reference import FdGrid, benchmark_oracle, solve_hjb_fd
from .regression import BasisSpec
from .validation import (laplace_functional_test, martingale_residual_test, poisson_count_test,
                         sweep_diagnostics)

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2


# -- builders ----------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> ControlledModel:
    return make_model(cfg.model, **cfg.model_params)


def build_grid(cfg: ExperimentConfig, model: ControlledModel) -> TimeGrid:
    return TimeGrid(cfg.t, model.horizon, cfg.steps)


def build_basis(cfg: ExperimentConfig) -> Optional[BasisSpec]:
    """Configured basis, or None for the solver's dimension-aware default."""
    if cfg.basis_kind == "polynomial":
        return BasisSpec(kind="polynomial", degree=cfg.basis_degree)
    if cfg.basis_cells is not None:
        cells = cfg.basis_cells[0] if len(cfg.basis_cells) == 1 else cfg.basis_cells
        return BasisSpec(kind="partition", cells_per_dim=cells)
    return None


def penalty_max(cfg: ExperimentConfig, grid: TimeGrid) -> float:
    return cfg.penalty_max if cfg.penalty_max is not None else default_penalty_max(grid.dt)


def penalty_schedule(cfg: ExperimentConfig, grid: TimeGrid):
    """Configured penalties, or powers of two with ``n dt <= 1/4`` merged with the largest penalty.

    The doubling ladder extends beyond the value penalty so that the decay of
    the constraint norm is measured over a usable range.
    """
    if cfg.penalties is not None:
        return list(cfg.penalties)
    top = penalty_max(cfg, grid)
    out, n = [], 1.0
    while n * grid.dt <= 0.25 + 1e-12:
        out.append(n)
        n *= 2
    out = sorted(set(out) | {top})
    return [v for i, v in enumerate(out) if i == 0 or v > out[i - 1] * (1 + 1e-9)]


def value_index(penalties, top) -> int:
    """Index of the value penalty in a sweep (the last entry if it is absent)."""
    for i, v in enumerate(penalties):
        if abs(v - top) <= 1e-9 * max(1.0, abs(top)):
            return i
    return len(penalties) - 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(report: dict, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2)
        fh.write("\n")
    return path


NON_NUMERIC_KEYS = ("timings", "config", "report_path")


def numeric_payload(report: dict) -> dict:
    """Report without timings and the echoed config: the part that must be reproducible.

    The echoed config is excluded because it records run-only settings such as
    the worker count and output directory.
    """
    return {k: v for k, v in report.items() if k not in NON_NUMERIC_KEYS}


def _header(cfg, model, grid):
    return {
        "model": model.name,
        "model_params": dict(model.params),
        "grid": {"t0": grid.t0, "t1": grid.t1, "steps": grid.steps, "dt": grid.dt},
        "seed": cfg.seed,
    }


def _dump_paths(cfg, model, grid, report):
    if cfg.dump_paths <= 0:
        return
    anchors = probe_anchors(model, cfg.anchor, cfg.interior_probe_count)
    ens = simulate_ensemble(model, grid, cfg.dump_paths, cfg.x, anchors[0], anchor_seed(cfg.seed, 0),
                            start_spread=cfg.start_spread, workers=cfg.workers)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ens.dump_csv(os.path.join(cfg.out_dir, "paths.csv"))
    report.setdefault("artifacts", {})["paths"] = "paths.csv"


# -- solve / sweep -------------------------------------------------------------

def _sweep(cfg, model, grid, penalties):
    return penalty_sweep(model, cfg.t, cfg.x, cfg.anchor, grid, cfg.n_paths, build_basis(cfg), penalties,
                         cfg.interior_probe_count, cfg.seed, start_spread=cfg.start_spread,
                         workers=cfg.workers)


def run_solve(cfg: ExperimentConfig, command: str = "solve"):
    """Value at the largest penalty (``solve``) or over the penalty schedule (``sweep``).

    ``solve`` uses only the largest penalty unless penalties are configured
    explicitly. ``sweep`` always uses the full schedule and adds the sweep
    diagnostics when at least three penalties are present.
    """
    cfg = cfg.resolved()
    t_start = time.perf_counter()
    model = build_model(cfg)
    grid = build_grid(cfg, model)
    if command == "solve" and cfg.penalties is None:
        penalties = [penalty_max(cfg, grid)]
    else:
        penalties = penalty_schedule(cfg, grid)
    rep = _sweep(cfg, model, grid, penalties)
    iv = value_index(rep.penalties, penalty_max(cfg, grid)) if cfg.penalties is None else len(penalties) - 1
    t_solve = time.perf_counter() - t_start
    report = {"command": command, **_header(cfg, model, grid)}
    report.update({
        "penalties": rep.penalties, "values": rep.values, "stderr": rep.stderr,
        "constraint_norms": rep.constraint_norms, "a_spreads": rep.a_spreads,
        "value_at": {"value": rep.values[iv], "std_error": rep.stderr[iv], "a_spread": rep.a_spreads[iv],
                     "penalty": rep.penalties[iv], "anchors": rep.anchors,
                     "per_anchor": rep.per_anchor_values[:, iv]},
        "sweep": rep.to_dict(),
    })
    oracle = benchmark_oracle(model, cfg.t, cfg.x)
    if oracle is not None:
        report["oracle"] = {"value": oracle,
                            "rel_error": abs(rep.values[iv] - oracle) / max(abs(oracle), 1e-300)}
    exit_code = EXIT_OK
    if command == "sweep":
        if len(penalties) >= 3:
            diag = sweep_diagnostics(rep, spread_fraction=cfg.validation_spread_fraction)
            report["diagnostics"] = diag.to_dict()
            if not diag.all_pass:
                exit_code = EXIT_FAILURE
        else:
            report["diagnostics"] = {"skipped": "fewer than 3 penalties"}
    _dump_paths(cfg, model, grid, report)
    report["config"] = cfg.to_dict()
    report["timings"] = {"solve_seconds": t_solve, "total_seconds": time.perf_counter() - t_start}
    report["report_path"] = write_report(report, cfg.out_dir, f"{command}_report.json")
    return exit_code, report


def run_sweep(cfg: ExperimentConfig):
    return run_solve(cfg, command="sweep")


# -- reference -----------------------------------------------------------------

def run_reference(cfg: ExperimentConfig):
    """Finite-difference solution, CSV export and comparison with the closed form."""
    cfg = cfg.resolved()
    t_start = time.perf_counter()
    model = build_model(cfg)
    if cfg.fd_x_min is None or cfg.fd_x_max is None:
        raise ConfigError("fd.x_min and fd.x_max are required for this model", None, cfg.source)
    grid = FdGrid.stable(model, cfg.fd_x_min, cfg.fd_x_max, cfg.fd_nodes, cfg.fd_control_nodes,
                         cfg.fd_delta_split, t0=cfg.t, safety=cfg.fd_safety)
    sol = solve_hjb_fd(model, grid)
    stride = max(1, grid.time_steps // 100)
    os.makedirs(cfg.out_dir, exist_ok=True)
    sol.to_csv(os.path.join(cfg.out_dir, "fd_solution.csv"), time_stride=stride)
    rows = []
    for xp in cfg.fd_probes:
        fd = sol.value_at(cfg.t, xp)
        oracle = benchmark_oracle(model, cfg.t, [xp])
        rel = None if oracle is None else abs(fd - oracle) / max(abs(oracle), 1e-300)
        rows.append({"x": xp, "fd_value": fd, "oracle_value": oracle, "rel_error": rel})
    report = {
        "command": "reference", "model": model.name, "model_params": dict(model.params),
        "fd_grid": {"x_min": grid.x_min, "x_max": grid.x_max, "nodes": grid.nodes, "dx": grid.dx,
                    "time_steps": grid.time_steps, "dt_fd": grid.dt_fd,
                    "control_nodes": grid.control_nodes, "delta_split": grid.delta_split},
        "boundary_policy": sol.boundary_policy,
        "comparison": rows,
        "artifacts": {"fd_solution": "fd_solution.csv", "time_stride": stride},
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "timings": {"total_seconds": time.perf_counter() - t_start},
    }
    report["report_path"] = write_report(report, cfg.out_dir, "reference_report.json")
    return EXIT_OK, report


# -- validation ----------------------------------------------------------------

LAPLACE_CHOICES = {
    "constant": lambda t, e: np.full(np.shape(t), 0.5),
    "time-and-mark": lambda t, e: np.where(t < 0.5, 1.0, 0.2) * (1.0 + np.abs(e[:, 0])),
    "mark-sign": lambda t, e: np.where(e[:, 0] > 0, 2.0 * t, 0.1),
}


def run_validate(cfg: ExperimentConfig):
    """Run the configured statistical checks; exit 2 if any applicable one fails.

    Checks that do not apply to the model (Poisson counts without a constant
    intensity, jump identities without jumps) are recorded as skipped.
    """
    cfg = cfg.resolved()
    t_start = time.perf_counter()
    model = build_model(cfg)
    grid = build_grid(cfg, model)
    thr = cfg.validation_threshold
    tests = {}
    anchors = probe_anchors(model, cfg.anchor, cfg.interior_probe_count)
    need_ens = any(n in cfg.validation_tests for n in ("poisson", "laplace", "martingale"))
    ens = None
    if need_ens:
        ens = simulate_ensemble(model, grid, cfg.n_paths, cfg.x, anchors[0], anchor_seed(cfg.seed, 0),
                                start_spread=cfg.start_spread, workers=cfg.workers)
    if "poisson" in cfg.validation_tests:
        if model.name == "constant-intensity":
            tests["poisson"] = poisson_count_test(ens, model.params["rate"]).to_dict()
        else:
            tests["poisson"] = {"skipped": "model has no constant intensity"}
    if "laplace" in cfg.validation_tests:
        if model.has_jumps:
            for name, ell in LAPLACE_CHOICES.items():
                tests[f"laplace[{name}]"] = laplace_functional_test(ens, model.intensity, ell, thr).to_dict()
        else:
            tests["laplace"] = {"skipped": "model has no jumps"}
    if "martingale" in cfg.validation_tests:
        sol = backward_solve(model, ens, build_basis(cfg), penalty_max(cfg, grid))
        tests["martingale"] = martingale_residual_test(sol, ens, model, thr).to_dict()
        del sol
    ens = None
    if "sweep" in cfg.validation_tests:
        pens = penalty_schedule(cfg, grid)
        if len(pens) >= 3:
            rep = _sweep(cfg, model, grid, pens)
            diag = sweep_diagnostics(rep, spread_fraction=cfg.validation_spread_fraction).to_dict()
            diag["pass"] = diag["all_pass"]
            tests["sweep"] = diag
        else:
            tests["sweep"] = {"skipped": "fewer than 3 penalties"}
    ran = [v for v in tests.values() if "skipped" not in v]
    all_pass = all(v["pass"] for v in ran)
    report = {"command": "validate", **_header(cfg, model, grid),
              "validation": {"tests": tests, "all_pass": all_pass},
              "config": cfg.to_dict(),
              "timings": {"total_seconds": time.perf_counter() - t_start}}
    report["report_path"] = write_report(report, cfg.out_dir, "validate_report.json")
    return (EXIT_OK if all_pass else EXIT_FAILURE), report
