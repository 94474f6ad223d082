"""Command-line interface: ``penbsde {solve,sweep,reference,validate}``.

Exit codes: 0 success, 1 configuration error, 2 solver or validation failure.
The output directory is taken from ``--out``, then ``$PENBSDE_OUT_DIR``, then
the config's ``output.dir``.
"""
from __future__ import annotations

import sys

import click

from .config import ExperimentConfig, apply_overrides, load_config, validate_config
from .errors import ConfigError, PenBsdeError
from .runner import EXIT_CONFIG, EXIT_FAILURE, run_reference, run_solve, run_sweep, run_validate


def _options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Config file."),
        click.option("--seed", type=int, help="Master seed."),
        click.option("--paths", type=int, help="Number of paths per ensemble."),
        click.option("--steps", type=int, help="Number of time steps."),
        click.option("--out", type=click.Path(file_okay=False), help="Output directory."),
        click.option("--model", help="Benchmark model name."),
        click.option("--penalties", help="Comma-separated penalties, or 'auto'."),
        click.option("--workers", type=int, help="Threads for forward simulation."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _load(config_path, **overrides) -> ExperimentConfig:
    if config_path:
        try:
            cfg = load_config(config_path)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    else:
        cfg = ExperimentConfig()
        validate_config(cfg)
    return apply_overrides(cfg, **overrides)


def _summary(report):
    cmd = report["command"]
    if cmd in ("solve", "sweep"):
        va = report["value_at"]
        click.echo(f"{report['model']}: value {va['value']:.6g} +- {va['std_error']:.2g} "
                   f"(penalty {va['penalty']:.4g}, anchor spread {va['a_spread']:.3g})")
        if "oracle" in report:
            click.echo(f"oracle {report['oracle']['value']:.6g}, "
                       f"relative error {report['oracle']['rel_error']:.3%}")
        if cmd == "sweep":
            for n, v, s, F in zip(report["penalties"], report["values"], report["stderr"],
                                  report["constraint_norms"]):
                click.echo(f"  n={n:<8.4g} value={v:<12.6g} stderr={s:<10.3g} F={F:.4g}")
            diag = report.get("diagnostics", {})
            if "all_pass" in diag:
                click.echo(f"diagnostics: monotone={diag['monotone']} "
                           f"constraint_decaying={diag['constraint_decaying']} "
                           f"a_independent={diag['a_independent']} slope={diag['slope']:.3f}")
    elif cmd == "reference":
        for row in report["comparison"]:
            rel = "n/a" if row["rel_error"] is None else f"{row['rel_error']:.3%}"
            oracle = "n/a" if row["oracle_value"] is None else f"{row['oracle_value']:.6g}"
            click.echo(f"x={row['x']:.6g} fd={row['fd_value']:.6g} oracle={oracle} rel_error={rel}")
    elif cmd == "validate":
        for name, res in report["validation"]["tests"].items():
            if "skipped" in res:
                click.echo(f"{name}: skipped ({res['skipped']})")
            else:
                extra = f" z={res['z_score']:.3f}" if "z_score" in res else ""
                click.echo(f"{name}: {'pass' if res['pass'] else 'FAIL'}{extra}")
    click.echo(f"report: {report['report_path']}")


def _run(runner, config_path, **overrides):
    try:
        cfg = _load(config_path, **overrides)
        code, report = runner(cfg)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (PenBsdeError, ValueError, ArithmeticError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    _summary(report)
    sys.exit(code)


@click.group()
def main():
    """Penalized BSDE solver for randomized control problems with jumps."""


@main.command()
@_options
def solve(config_path, **kw):
    """Value at the largest penalty, averaged over interior anchors."""
    _run(run_solve, config_path, **kw)


@main.command()
@_options
def sweep(config_path, **kw):
    """Values and diagnostics over an increasing penalty schedule."""
    _run(run_sweep, config_path, **kw)


@main.command()
@_options
def reference(config_path, **kw):
    """Finite-difference reference solution and closed-form comparison."""
    _run(run_reference, config_path, **kw)


@main.command()
@_options
def validate(config_path, **kw):
    """Statistical validation suite."""
    _run(run_validate, config_path, **kw)


if __name__ == "__main__":
    main()
