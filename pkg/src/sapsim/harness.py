"""Scenario orchestration: base runs, parameter sweeps, and file outputs.

A scenario bundles parameter overrides, a forcing source (synthetic
diurnal sinusoid or a smoothed field CSV), a duration, and an optional
one-parameter sweep.  Each run produces cadence-sampled stem-averaged
pressure and cumulative root uptake, thaw/freeze event annotations from
the forcing signal, and pressure envelope extrema.  Emitted pressures are
gauge by default (atmosphere subtracted) so multi-day build-up reads
directly from the files.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.signal import find_peaks

from sapsim import ingest, solver
from sapsim.params import ModelParams, ParamError, build_params, P_ATM
from sapsim.ingest import KELVIN_OFFSET

logger = logging.getLogger(__name__)

#: Admissible sweep parameters and their validated ranges.
SWEEP_RANGES = {
    "R_tree": (0.05, 0.30),
    "theta": (0.0, 0.7),
    "A_tree": (1.0, 100.0),
    "Cr_out": (0.05, 0.75),
    "gamma_s": (0.015, 0.04),
}

#: Default prominence (Pa) below which pressure wiggles are not extrema.
ENVELOPE_PROMINENCE = 1000.0


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class Scenario:
    """One simulation request (or a family of them, via ``sweep``)."""

    overrides: dict = dataclass_field(default_factory=dict)
    forcing: str = "sinusoid"          # "sinusoid" or "csv"
    csv_path: str = None
    smoothing_passes: int = 10
    allow_gaps: bool = False
    duration_s: float = 5 * 86400.0
    cadence_s: float = 900.0
    sweep: tuple = None                # (param_name, [values])
    outdir: str = None
    gauge: bool = True
    plot: bool = False
    micro_enabled: bool = True
    record_cells: bool = False
    integrator: solver.IntegratorConfig = None

    def __post_init__(self):
        if self.forcing not in ("sinusoid", "csv"):
            raise ScenarioError(f"unknown forcing source {self.forcing!r}")
        if self.forcing == "csv" and not self.csv_path:
            raise ScenarioError("csv forcing requires csv_path")
        if self.forcing == "sinusoid" and self.csv_path:
            raise ScenarioError("exactly one forcing source: drop csv_path "
                                "or set forcing='csv'")
        if self.duration_s < 0:
            raise ScenarioError("duration must be non-negative")
        if self.cadence_s <= 0:
            raise ScenarioError("cadence must be positive")
        if self.sweep is not None:
            name, values = self.sweep
            if name not in SWEEP_RANGES:
                raise ScenarioError(f"sweep parameter {name!r} not in "
                                    f"{sorted(SWEEP_RANGES)}")
            lo, hi = SWEEP_RANGES[name]
            for v in values:
                if not lo <= float(v) <= hi:
                    raise ScenarioError(f"sweep value {v} for {name} outside "
                                        f"[{lo}, {hi}]")
            if len(values) == 0:
                raise ScenarioError("sweep needs at least one value")


@dataclass
class RunOutput:
    """Cadence-sampled results of one run."""

    label: str
    params: ModelParams
    times: np.ndarray          # s, uniform at the output cadence
    pbar_pa: np.ndarray        # absolute stem-averaged vessel pressure, Pa
    uroot_m3: np.ndarray
    ambient_c: np.ndarray
    events: list               # (time_s, "thaw"|"freeze")
    env_max: np.ndarray        # columns (time_s, pbar_pa), may be empty
    env_min: np.ndarray
    stats: dict


def _forcing_signal(sc: Scenario):
    """(callable t->Kelvin, event list, provenance) for the scenario forcing."""
    if sc.forcing == "sinusoid":
        series = ingest.synthetic_series(max(sc.duration_s, 900.0), sc.cadence_s)

        def signal(t):
            return float(ingest.synthetic_sinusoid(t)) + KELVIN_OFFSET
    else:
        series = ingest.load_csv(sc.csv_path, allow_gaps=sc.allow_gaps)
        series = ingest.smooth(series, sc.smoothing_passes)
        t0 = series.times[0]
        if t0 != 0.0:
            # run time starts at the first sample
            series = ingest.TemperatureSeries(series.times - t0, series.temps_c,
                                              series.provenance)

        def signal(t):
            return ingest.sample_kelvin(series, t)

    events = [(t, kind) for t, kind in ingest.zero_crossings(series)
              if 0.0 <= t <= sc.duration_s]
    return signal, events, series.provenance


def _sweep_params(sc: Scenario):
    """Resolved (label, params) list; non-swept values reset to the base case."""
    if sc.sweep is None:
        return [("base", build_params(sc.overrides))]
    name, values = sc.sweep
    out = []
    for v in values:
        raw = dict(sc.overrides)
        raw[name] = float(v)
        out.append((f"{name}={float(v):g}", build_params(raw)))
    return out


def run_scenario(sc: Scenario):
    """Run a scenario; returns one RunOutput, or a list for a sweep.

    Sweep entries are run independently in deterministic order; outputs are
    emitted under per-run directories when ``outdir`` is set.
    """
    signal, events, provenance = _forcing_signal(sc)
    results = []
    for label, params in _sweep_params(sc):
        t_init = signal(0.0)
        field = solver.build_grid(params, t_init, micro_enabled=sc.micro_enabled)
        cfg = sc.integrator or solver.IntegratorConfig()
        logger.info("run %s: n_x=%d, pi=%.4f, forcing=%s", label, field.n_x,
                    field.pi_hat, provenance)
        traj = solver.advance(field, signal, sc.duration_s, cfg,
                              cadence_s=sc.cadence_s,
                              record_cells=sc.record_cells)
        env_max, env_min = extract_envelope(traj.times, traj.pbar_pa)
        out = RunOutput(
            label=label, params=params, times=traj.times,
            pbar_pa=traj.pbar_pa, uroot_m3=traj.uroot_m3,
            ambient_c=traj.ambient_k - KELVIN_OFFSET,
            events=list(events), env_max=env_max, env_min=env_min,
            stats=dict(traj.stats),
        )
        results.append(out)
        if sc.outdir:
            target = sc.outdir if sc.sweep is None else os.path.join(sc.outdir, label)
            emit_outputs(out, target, gauge=sc.gauge, plot=sc.plot)
    return results[0] if sc.sweep is None else results


def extract_envelope(times, values, min_prominence: float = ENVELOPE_PROMINENCE):
    """Local maxima/minima of a pressure series, ripple-filtered by prominence.

    Returns two arrays with columns (time_s, value); monotone series yield
    empty envelopes.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 3:
        empty = np.empty((0, 2))
        return empty, empty
    hi, _ = find_peaks(values, prominence=min_prominence)
    lo, _ = find_peaks(-values, prominence=min_prominence)
    env_max = np.column_stack([times[hi], values[hi]]) if hi.size else np.empty((0, 2))
    env_min = np.column_stack([times[lo], values[lo]]) if lo.size else np.empty((0, 2))
    return env_max, env_min


def alignment_report(out: RunOutput, window_s: float = 7200.0) -> dict:
    """Spike/thaw alignment check: envelope extrema near each crossing.

    For every thaw event, looks for a pressure envelope maximum within the
    window; for every freeze event, a minimum.  The qualitative field-data
    comparison reports these fractions (peak values are not compared).
    """
    def matched(evts, env):
        hits = []
        for t, _ in evts:
            ok = env.size > 0 and bool(np.any(np.abs(env[:, 0] - t) <= window_s))
            hits.append((t, ok))
        return hits

    thaws = [(t, k) for t, k in out.events if k == "thaw"]
    freezes = [(t, k) for t, k in out.events if k == "freeze"]
    thaw_hits = matched(thaws, out.env_max)
    freeze_hits = matched(freezes, out.env_min)
    n_thaw = len(thaw_hits)
    n_freeze = len(freeze_hits)
    return {
        "window_s": window_s,
        "thaw_events": n_thaw,
        "thaw_matched": sum(ok for _, ok in thaw_hits),
        "freeze_events": n_freeze,
        "freeze_matched": sum(ok for _, ok in freeze_hits),
        "thaw_detail": thaw_hits,
        "freeze_detail": freeze_hits,
    }


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def emit_outputs(out: RunOutput, outdir, gauge: bool = True,
                 plot: bool = False) -> list:
    """Write the run's CSV files, manifest, and optional SVG plot.

    Pressures go out as gauge values (absolute minus one atmosphere) unless
    ``gauge`` is disabled.  Outputs are deterministic: identical runs
    produce byte-identical files.
    """
    os.makedirs(outdir, exist_ok=True)
    offset = P_ATM if gauge else 0.0
    written = []

    def path(name):
        written.append(os.path.join(outdir, name))
        return written[-1]

    _write_csv(path("pressure.csv"), "time_s,pbar_pa",
               ((_fmt(t), _fmt(p - offset)) for t, p in zip(out.times, out.pbar_pa)))
    _write_csv(path("uptake.csv"), "time_s,uroot_m3",
               ((_fmt(t), _fmt(u)) for t, u in zip(out.times, out.uroot_m3)))
    _write_csv(path("events.csv"), "time_s,kind",
               ((_fmt(t), kind) for t, kind in out.events))
    env_rows = [(t, "max", v) for t, v in out.env_max] + \
               [(t, "min", v) for t, v in out.env_min]
    env_rows.sort(key=lambda r: r[0])
    _write_csv(path("envelope.csv"), "time_s,kind,pbar_pa",
               ((_fmt(t), kind, _fmt(v - offset)) for t, kind, v in env_rows))

    manifest = {
        "label": out.label,
        "gauge": bool(gauge),
        "atmosphere_pa": P_ATM,
        "samples": int(out.times.size),
        "cadence_s": float(out.times[1] - out.times[0]) if out.times.size > 1 else None,
        "params": {k: v for k, v in out.params.as_dict().items()},
        "stats": {k: (float(v) if isinstance(v, (int, float, np.floating)) else v)
                  for k, v in out.stats.items()},
    }
    with open(path("run.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if plot:
        _plot_run(out, os.path.join(outdir, "pressure.svg"), offset)
        written.append(os.path.join(outdir, "pressure.svg"))
    return written


def _plot_run(out: RunOutput, path, offset) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_t, ax_p) = plt.subplots(
        2, 1, sharex=True, figsize=(9, 6),
        gridspec_kw={"height_ratios": [1, 2]})
    days = out.times / 86400.0
    ax_t.plot(days, out.ambient_c, color="tab:green", lw=1.0)
    ax_t.axhline(0.0, color="gray", lw=0.6, ls=":")
    ax_t.set_ylabel("ambient [degC]")
    ax_p.plot(days, (out.pbar_pa - offset) / 1000.0, color="tab:blue", lw=1.2)
    if out.env_max.size:
        ax_p.plot(out.env_max[:, 0] / 86400.0, (out.env_max[:, 1] - offset) / 1000.0,
                  "v--", color="tab:red", ms=4, lw=0.8)
    if out.env_min.size:
        ax_p.plot(out.env_min[:, 0] / 86400.0, (out.env_min[:, 1] - offset) / 1000.0,
                  "^--", color="tab:purple", ms=4, lw=0.8)
    for t, kind in out.events:
        for ax in (ax_t, ax_p):
            ax.axvline(t / 86400.0, color="k", lw=0.5, ls=":", alpha=0.6)
    ax_p.set_xlabel("time [days]")
    ax_p.set_ylabel("stem-averaged pressure [kPa]")
    ax_p.set_title(out.label)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
