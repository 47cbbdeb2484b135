"""Ambient temperature signals: field CSV files, smoothing, synthetic forcing.

Field loggers store one sample per 15 minutes; the simulator needs a
continuous signal, so raw series are regularized by a repeated
[1/4, 1/2, 1/4] weighted average and then sampled by linear interpolation.
Temperatures are degrees Celsius here and converted to Kelvin only at the
solver boundary.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

logger = logging.getLogger(__name__)

KELVIN_OFFSET = 273.15


class IngestError(ValueError):
    """Raised for malformed or inconsistent temperature inputs."""


@dataclass(frozen=True)
class TemperatureSeries:
    """Sampled ambient temperature with provenance.

    Times are seconds (strictly increasing, any cadence); temperatures are
    degrees Celsius.  Immutable after load; sampling is pure.
    """

    times: np.ndarray
    temps_c: np.ndarray
    provenance: str = "raw"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.temps_c, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise IngestError("times and temperatures must be equal-length 1-D arrays")
        if t.size == 0:
            raise IngestError("empty temperature series")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(v)):
            raise IngestError("temperature series contains non-finite values")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise IngestError("sample times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "temps_c", v)

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def cadence(self) -> float:
        """Nominal sample spacing, s (median of the time differences)."""
        if len(self) < 2:
            return 0.0
        return float(np.median(np.diff(self.times)))

    @property
    def span(self) -> tuple:
        return float(self.times[0]), float(self.times[-1])


def _parse_time(token: str, lineno: int) -> float:
    token = token.strip()
    try:
        return float(token)
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(token.replace("Z", "+00:00"))
    except ValueError as exc:
        raise IngestError(f"line {lineno}: unparseable time {token!r} "
                          "(need epoch seconds or ISO-8601)") from exc
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


_TIME_NAMES = {"time", "timestamp", "time_s"}
_TEMP_NAMES = {"temp_c", "temperature_c", "temp", "temperature"}


def load_csv(path, allow_gaps: bool = False) -> TemperatureSeries:
    """Read a ``time,temp_c`` CSV into a raw TemperatureSeries.

    The time column holds epoch seconds or ISO-8601 stamps.  Rows must be
    sorted and unique in time; gaps longer than twice the nominal cadence
    are rejected unless ``allow_gaps`` bridges them linearly (logged).
    """
    times, temps = [], []
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        names = [c.strip().lower() for c in header[:2]]
        if len(header) < 2 or names[0] not in _TIME_NAMES or names[1] not in _TEMP_NAMES:
            raise IngestError(f"{path}: expected header 'time,temp_c', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise IngestError(f"line {lineno}: expected 2 columns, got {len(row)}")
            t = _parse_time(row[0], lineno)
            try:
                v = float(row[1])
            except ValueError as exc:
                raise IngestError(f"line {lineno}: bad temperature {row[1]!r}") from exc
            if not math.isfinite(v):
                raise IngestError(f"line {lineno}: non-finite temperature")
            if times:
                if t == times[-1]:
                    raise IngestError(f"line {lineno}: duplicate time {t}")
                if t < times[-1]:
                    raise IngestError(f"line {lineno}: time goes backwards "
                                      f"({t} after {times[-1]})")
            times.append(t)
            temps.append(v)
    if not times:
        raise IngestError(f"{path}: no data rows")
    series = TemperatureSeries(np.array(times), np.array(temps))
    if len(series) >= 3:
        gaps = np.diff(series.times)
        limit = 2.0 * series.cadence
        bad = np.flatnonzero(gaps > limit)
        if bad.size and not allow_gaps:
            i = int(bad[0])
            raise IngestError(
                f"gap of {gaps[i]:.0f} s after t={series.times[i]:.0f} s exceeds "
                f"twice the {series.cadence:.0f} s cadence (pass allow_gaps to bridge)")
        if bad.size:
            logger.warning("bridging %d gap(s) longer than %.0f s by linear interpolation",
                           bad.size, limit)
            grid = [series.times[0]]
            cad = series.cadence
            for t in series.times[1:]:
                while t - grid[-1] > limit:
                    grid.append(grid[-1] + cad)
                grid.append(float(t))
            grid = np.array(grid)
            series = TemperatureSeries(grid, np.interp(grid, series.times, series.temps_c))
    return series


def smooth(series: TemperatureSeries, passes: int = 10) -> TemperatureSeries:
    """Repeated [1/4, 1/2, 1/4] weighted-average smoothing, endpoints held fixed."""
    if len(series) < 3:
        raise IngestError(f"series too short to smooth ({len(series)} samples)")
    if passes < 0:
        raise IngestError("passes must be non-negative")
    v = series.temps_c.copy()
    for _ in range(passes):
        v[1:-1] = 0.25 * v[:-2] + 0.5 * v[1:-1] + 0.25 * v[2:]
    base = 0
    if series.provenance.startswith("smoothed("):
        base = int(series.provenance[9:-1])
    prov = f"smoothed({base + passes})" if (passes or base) else series.provenance
    return TemperatureSeries(series.times.copy(), v, prov)


def synthetic_sinusoid(t):
    """Diurnal forcing 5 - 15*sin(2*pi*t/86400) degC; range [-10, +20]."""
    t = np.asarray(t, dtype=float)
    out = 5.0 - 15.0 * np.sin(2.0 * math.pi * t / 86400.0)
    return out if out.ndim else float(out)


def synthetic_series(duration_s: float, cadence_s: float = 900.0) -> TemperatureSeries:
    """Sinusoid sampled on a uniform grid covering [0, duration_s]."""
    n = max(int(math.ceil(duration_s / cadence_s)), 1)
    t = np.arange(n + 1) * cadence_s
    return TemperatureSeries(t, synthetic_sinusoid(t), "synthetic")


def sample(series: TemperatureSeries, t):
    """Piecewise-linear interpolation, degC; clamped hold beyond the ends."""
    out = np.interp(np.asarray(t, dtype=float), series.times, series.temps_c)
    return out if out.ndim else float(out)


def sample_kelvin(series: TemperatureSeries, t):
    return sample(series, t) + KELVIN_OFFSET


def zero_crossings(series: TemperatureSeries, threshold: float = 0.0):
    """Times where the signal crosses a threshold, labeled thaw (up) or freeze (down).

    Crossing times are linearly interpolated within the straddling segment.
    Returns a list of (time_s, kind) pairs in time order.
    """
    above = series.temps_c > threshold
    events = []
    for i in np.flatnonzero(above[1:] != above[:-1]):
        t0, t1 = series.times[i], series.times[i + 1]
        v0, v1 = series.temps_c[i], series.temps_c[i + 1]
        tc = t0 + (threshold - v0) * (t1 - t0) / (v1 - v0)
        events.append((float(tc), "thaw" if above[i + 1] else "freeze"))
    return events
