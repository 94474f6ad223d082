"""Experiment configuration: a flat ``section.key = value`` text format.

Blank lines and ``#`` comments are ignored. Every error names the file and
line. Keys under ``model.`` other than ``model.name`` are passed to the
benchmark constructor as floats. Values that a benchmark preset can supply
(start point, anchor, start dispersion, finite-difference window) may be
omitted.

Example::

    model.name = uvm
    grid.steps = 100
    bsde.n_paths = 100000
    bsde.penalties = auto
    run.seed = 7
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError
from .model import BENCHMARKS

OUT_DIR_ENV = "PENBSDE_OUT_DIR"

VALIDATION_TESTS = ("poisson", "laplace", "martingale", "sweep")


@dataclass(frozen=True)
class Preset:
    """Benchmark defaults.

    ``tests`` lists the validation checks that are meaningful for the model.
    The sweep checks need a value that depends on the control; the
    intensity benchmarks have a martingale payoff with value ``x`` for every
    control, so their constraint norms and anchor spreads are pure noise.
    """

    x: Tuple[float, ...]
    start_spread: float
    fd_window: Tuple[float, float]
    fd_nodes: int
    tests: Tuple[str, ...] = VALIDATION_TESTS


PRESETS = {
    "uvm": Preset((100.0,), 0.0, (20.0, 300.0), 400, ("martingale", "sweep")),
    "nondominated-jump": Preset((0.0,), 0.5, (-2.5, 12.5), 4801, ("laplace", "martingale", "sweep")),
    "trivial-drift": Preset((0.0,), 0.0, (-2.0, 4.0), 121),
    "constant-intensity": Preset((0.0,), 0.0, (-6.0, 14.0), 801, ("poisson", "laplace", "martingale")),
    "controlled-intensity": Preset((0.0,), 0.0, (-6.0, 8.0), 561, ("laplace", "martingale")),
}


@dataclass
class ExperimentConfig:
    """Resolved experiment description. ``None`` means "use the model preset"."""

    model: str = "uvm"
    model_params: dict = field(default_factory=dict)
    t: float = 0.0
    x: Optional[Tuple[float, ...]] = None
    anchor: Optional[Tuple[float, ...]] = None
    steps: int = 100
    n_paths: int = 100_000
    start_spread: Optional[float] = None
    basis_kind: str = "partition"
    basis_degree: int = 3
    basis_cells: Optional[Tuple[int, ...]] = None
    penalties: Optional[Tuple[float, ...]] = None   # None: auto schedule
    penalty_max: Optional[float] = None
    interior_probe_count: int = 5
    seed: int = 0
    workers: int = 1
    out_dir: str = "results"
    dump_paths: int = 0
    fd_x_min: Optional[float] = None
    fd_x_max: Optional[float] = None
    fd_nodes: Optional[int] = None
    fd_control_nodes: int = 21
    fd_delta_split: float = 1e-3
    fd_safety: float = 0.99
    fd_probes: Optional[Tuple[float, ...]] = None
    validation_tests: Optional[Tuple[str, ...]] = None   # None: preset's list
    validation_threshold: float = 4.0
    validation_spread_fraction: float = 0.03
    lines: dict = field(default_factory=dict, compare=False, repr=False)
    source: Optional[str] = field(default=None, compare=False, repr=False)

    # -- presets -------------------------------------------------------------
    @property
    def preset(self) -> Optional[Preset]:
        return PRESETS.get(self.model)

    def resolved(self) -> "ExperimentConfig":
        """Copy with every preset-dependent field filled in."""
        pre = self.preset
        x = self.x if self.x is not None else (pre.x if pre else None)
        if x is None:
            raise ConfigError("problem.x is required for this model", self.lines.get("problem.x"), self.source)
        window = pre.fd_window if pre else (None, None)
        return replace(
            self, x=tuple(x),
            start_spread=self.start_spread if self.start_spread is not None else (pre.start_spread if pre else 0.0),
            fd_x_min=self.fd_x_min if self.fd_x_min is not None else window[0],
            fd_x_max=self.fd_x_max if self.fd_x_max is not None else window[1],
            fd_nodes=self.fd_nodes if self.fd_nodes is not None else (pre.fd_nodes if pre else 401),
            fd_probes=self.fd_probes if self.fd_probes is not None else tuple(x[:1]),
            validation_tests=(self.validation_tests if self.validation_tests is not None
                              else (pre.tests if pre else VALIDATION_TESTS)),
        )

    def to_dict(self) -> dict:
        out = {}
        for key, (attr, _) in KEYS.items():
            v = getattr(self, attr)
            out[key] = list(v) if isinstance(v, tuple) else v
        for k, v in sorted(self.model_params.items()):
            out[f"model.{k}"] = v
        return out

    def to_text(self) -> str:
        """Config file text that parses back to an equal config."""
        rows = []
        for key, v in self.to_dict().items():
            if key == "bsde.penalties" and v is None:
                v = "auto"
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(repr(e) if isinstance(e, float) else str(e) for e in v)
            elif isinstance(v, float):
                v = repr(v)
            rows.append(f"{key} = {v}")
        return "\n".join(rows) + "\n"


# -- parsing ------------------------------------------------------------------

def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _penalties(s):
    return None if s.strip().lower() == "auto" else _floats(s)


def _opt_float(s):
    return None if s.strip().lower() in ("auto", "none") else float(s)


def _tests(s):
    names = tuple(v.strip() for v in s.split(",") if v.strip())
    if names == ("none",):
        return ()
    bad = [n for n in names if n not in VALIDATION_TESTS]
    if bad:
        raise ValueError(f"unknown validation test(s) {bad}; known: {list(VALIDATION_TESTS)}")
    return names


KEYS = {
    "model.name": ("model", str),
    "problem.t": ("t", float),
    "problem.x": ("x", _floats),
    "problem.anchor": ("anchor", _floats),
    "grid.steps": ("steps", int),
    "bsde.n_paths": ("n_paths", int),
    "bsde.start_spread": ("start_spread", float),
    "bsde.penalties": ("penalties", _penalties),
    "bsde.penalty_max": ("penalty_max", _opt_float),
    "bsde.interior_probe_count": ("interior_probe_count", int),
    "basis.kind": ("basis_kind", str),
    "basis.degree": ("basis_degree", int),
    "basis.cells": ("basis_cells", _ints),
    "run.seed": ("seed", int),
    "run.workers": ("workers", int),
    "output.dir": ("out_dir", str),
    "output.dump_paths": ("dump_paths", int),
    "fd.x_min": ("fd_x_min", float),
    "fd.x_max": ("fd_x_max", float),
    "fd.nodes": ("fd_nodes", int),
    "fd.control_nodes": ("fd_control_nodes", int),
    "fd.delta_split": ("fd_delta_split", float),
    "fd.safety": ("fd_safety", float),
    "fd.probes": ("fd_probes", _floats),
    "validation.tests": ("validation_tests", _tests),
    "validation.threshold": ("validation_threshold", float),
    "validation.spread_fraction": ("validation_spread_fraction", float),
}


def parse_config(text: str, source: Optional[str] = None) -> ExperimentConfig:
    """Parse config text; raises ``ConfigError`` with the offending line."""
    cfg = ExperimentConfig(source=source)
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, source)
        seen[key] = lineno
        if key.startswith("model.") and key != "model.name":
            try:
                cfg.model_params[key[6:]] = float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}", lineno, source) from None
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        attr, conv = KEYS[key]
        try:
            setattr(cfg, attr, conv(value))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lineno, source) from None
    cfg.lines = seen
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def _fail(cfg, key, message):
    raise ConfigError(message, cfg.lines.get(key), cfg.source)


def validate_config(cfg: ExperimentConfig) -> None:
    """Check ranges and the cross-field guards (penalty step bound, path budget)."""
    if cfg.model not in BENCHMARKS:
        _fail(cfg, "model.name", f"unknown model {cfg.model!r}; known: {sorted(BENCHMARKS)}")
    if cfg.steps < 1:
        _fail(cfg, "grid.steps", "grid.steps must be >= 1")
    if cfg.n_paths < 1:
        _fail(cfg, "bsde.n_paths", "bsde.n_paths must be >= 1")
    if cfg.basis_kind not in ("polynomial", "partition"):
        _fail(cfg, "basis.kind", "basis.kind must be 'polynomial' or 'partition'")
    if cfg.basis_kind == "polynomial" and not 0 <= cfg.basis_degree <= 6:
        _fail(cfg, "basis.degree", "basis.degree must be in [0, 6]")
    if cfg.interior_probe_count < 0:
        _fail(cfg, "bsde.interior_probe_count", "bsde.interior_probe_count must be >= 0")
    if cfg.workers < 1:
        _fail(cfg, "run.workers", "run.workers must be >= 1")
    if not 0 <= cfg.t:
        _fail(cfg, "problem.t", "problem.t must be nonnegative")
    horizon = cfg.model_params.get("horizon", 1.0)
    if not cfg.t < horizon:
        _fail(cfg, "problem.t", "problem.t must be before the horizon")
    dt = (horizon - cfg.t) / cfg.steps
    pens = list(cfg.penalties or []) + ([cfg.penalty_max] if cfg.penalty_max is not None else [])
    for p in pens:
        if p < 0:
            _fail(cfg, "bsde.penalties", "penalties must be nonnegative")
        if p * dt > 1 + 1e-12:
            key = "bsde.penalties" if cfg.penalties and p in cfg.penalties else "bsde.penalty_max"
            _fail(cfg, key, f"penalty violates step bound: n*dt = {p}*{dt:.6g} = {p * dt:.6g} > 1")
    if cfg.penalties is not None:
        if not cfg.penalties:
            _fail(cfg, "bsde.penalties", "bsde.penalties is empty")
        if any(b <= a for a, b in zip(cfg.penalties, cfg.penalties[1:])):
            _fail(cfg, "bsde.penalties", "penalties must be strictly increasing")
    if cfg.basis_cells is not None:
        if any(c < 1 for c in cfg.basis_cells):
            _fail(cfg, "basis.cells", "basis.cells must be positive")
        size = int(np.prod([c + 1 for c in cfg.basis_cells])) if cfg.basis_kind == "partition" else 0
        if cfg.basis_kind == "partition" and 10 * size > cfg.n_paths:
            _fail(cfg, "bsde.n_paths", f"bsde.n_paths must be >= 10 x basis size ({size})")


def apply_overrides(cfg: ExperimentConfig, seed=None, paths=None, steps=None, out=None,
                    model=None, penalties=None, workers=None) -> ExperimentConfig:
    """Command-line overrides; the output directory falls back to ``$PENBSDE_OUT_DIR``."""
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if paths is not None:
        changes["n_paths"] = int(paths)
    if steps is not None:
        changes["steps"] = int(steps)
    if model is not None:
        changes["model"] = model
    if penalties is not None:
        try:
            changes["penalties"] = _penalties(penalties)
        except ValueError:
            raise ConfigError(f"--penalties: cannot parse {penalties!r}") from None
    if workers is not None:
        changes["workers"] = int(workers)
    env = os.environ.get(OUT_DIR_ENV)
    if out is not None:
        changes["out_dir"] = out
    elif env:
        changes["out_dir"] = env
    new = replace(cfg, **changes)
    validate_config(new)
    return new
