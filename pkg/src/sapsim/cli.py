"""Command-line entry point for batch simulations.

Usage:
    simulate --config configs/r1.cfg --forcing sinusoid --duration 5 --out results/
    simulate --forcing csv:field.csv --duration 27 --sweep gamma_s=0.015,0.03,0.04

Exit codes: 0 success, 2 configuration error, 3 forcing-data error,
4 solver failure.  SAPSIM_LOG sets the log level (default WARNING).
"""

from __future__ import annotations

import logging
import os
import sys

import click

from sapsim import harness, solver
from sapsim.harness import Scenario, ScenarioError
from sapsim.ingest import IngestError
from sapsim.microcell import CellIntegrationError
from sapsim.params import ParamError, load_config

EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_SOLVER = 4


def _setup_logging():
    level = os.environ.get("SAPSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_sweep(text):
    if text is None:
        return None
    if "=" not in text:
        raise ScenarioError(f"sweep must look like name=v1,v2,... got {text!r}")
    name, _, values = text.partition("=")
    try:
        vals = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise ScenarioError(f"bad sweep values in {text!r}") from exc
    return (name.strip(), vals)


def _parse_forcing(text):
    if text == "sinusoid":
        return "sinusoid", None
    if text.startswith("csv:"):
        path = text[4:]
        if not path:
            raise ScenarioError("csv forcing needs a path: csv:<path>")
        return "csv", path
    raise ScenarioError(f"forcing must be 'sinusoid' or 'csv:<path>', got {text!r}")


@click.command(name="simulate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Flat key=value parameter file (SI units).")
@click.option("--sweep", "sweep_text", default=None, metavar="PARAM=V1,V2,...",
              help="Sweep one parameter over a value list.")
@click.option("--out", "outdir", type=click.Path(file_okay=False), default=None,
              help="Output directory (per-run subdirectories for sweeps).")
@click.option("--forcing", "forcing_text", default="sinusoid",
              metavar="sinusoid|csv:<path>", help="Ambient temperature source.")
@click.option("--duration", "duration_days", type=float, default=5.0,
              help="Simulated duration in days.")
@click.option("--cadence", "cadence_s", type=float, default=900.0,
              help="Output sample spacing in seconds.")
@click.option("--smoothing-passes", type=int, default=10,
              help="Weighted-average smoothing passes for CSV forcing.")
@click.option("--allow-gaps", is_flag=True,
              help="Bridge CSV gaps longer than twice the cadence.")
@click.option("--absolute", "absolute_pressure", is_flag=True,
              help="Emit absolute pressures instead of gauge.")
@click.option("--plot", is_flag=True, help="Also write an SVG pressure plot.")
@click.option("--rtol", type=float, default=None,
              help="Override the integrator relative tolerance.")
def main(config_path, sweep_text, outdir, forcing_text, duration_days,
         cadence_s, smoothing_passes, allow_gaps, absolute_pressure, plot, rtol):
    """Run freeze-thaw stem pressure simulations."""
    _setup_logging()
    try:
        overrides = load_config(config_path) if config_path else {}
        forcing, csv_path = _parse_forcing(forcing_text)
        integrator = None
        if rtol is not None:
            integrator = solver.IntegratorConfig(rtol=rtol)
        sc = Scenario(
            overrides=overrides,
            forcing=forcing,
            csv_path=csv_path,
            smoothing_passes=smoothing_passes,
            allow_gaps=allow_gaps,
            duration_s=duration_days * 86400.0,
            cadence_s=cadence_s,
            sweep=_parse_sweep(sweep_text),
            outdir=outdir,
            gauge=not absolute_pressure,
            plot=plot,
            integrator=integrator,
        )
    except (ParamError, ScenarioError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    try:
        result = harness.run_scenario(sc)
    except IngestError as exc:
        click.echo(f"forcing-data error: {exc}", err=True)
        sys.exit(EXIT_INGEST)
    except (solver.SolverError, CellIntegrationError) as exc:
        click.echo(f"solver failure: {exc}", err=True)
        sys.exit(EXIT_SOLVER)
    except (ParamError, ScenarioError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    runs = result if isinstance(result, list) else [result]
    for run in runs:
        peak = (run.pbar_pa.max() - (0.0 if absolute_pressure else 101325.0)) / 1000.0
        click.echo(f"{run.label}: {run.times.size} samples, "
                   f"{len(run.events)} freeze/thaw events, "
                   f"peak pressure {peak:.1f} kPa")
    if outdir:
        click.echo(f"outputs written under {outdir}")
    sys.exit(0)


if __name__ == "__main__":
    main()
