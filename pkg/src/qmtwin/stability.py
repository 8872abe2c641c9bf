"""Overlapping Allan deviation of metric time series with chi-square intervals.

Samples are treated like fractional-frequency readings ``y_i`` taken every
``tau0``.  By default the deviation is absolute (same units as the samples);
``normalize=True`` divides by the series mean first.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, NamedTuple

import numpy as np
from scipy.stats import chi2

ONE_SIGMA = 0.6826894921370859


class StabilityError(ValueError):
    pass


@dataclass
class StabilitySeries:
    """Equally spaced samples.

    ``timestamps`` (seconds) is optional; when given, spacing is checked
    against ``tau0`` and gaps are rejected unless ``interpolate_gaps``.
    NaN samples count as gaps too.
    """

    values: np.ndarray
    tau0: float
    t_start: float = 0.0
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.tau0 <= 0:
            raise StabilityError("tau0 must be > 0")

    @property
    def size(self) -> int:
        return len(self.values)

    def gaps(self, tolerance: float = 0.5) -> np.ndarray:
        """Indices i where a gap follows sample i."""
        bad = np.zeros(max(self.size - 1, 0), bool)
        if self.timestamps is not None and self.size > 1:
            bad |= np.diff(self.timestamps) > (1 + tolerance) * self.tau0
        return np.nonzero(bad)[0]

    def regularized(self, interpolate_gaps: bool = False) -> StabilitySeries:
        """Return a gap-free series or raise; optionally fill gaps linearly."""
        nan = np.isnan(self.values)
        gaps = self.gaps()
        if not nan.any() and not len(gaps):
            return self
        if not interpolate_gaps:
            raise StabilityError(
                f"series has {len(gaps)} timing gaps and {int(nan.sum())} missing samples; "
                "ADEV needs uniform sampling (enable gap interpolation explicitly)")
        if self.timestamps is not None:
            t = np.asarray(self.timestamps, float)
        else:
            t = self.t_start + self.tau0 * np.arange(self.size)
        ok = ~nan
        grid = t[0] + self.tau0 * np.arange(int(round((t[-1] - t[0]) / self.tau0)) + 1)
        return StabilitySeries(np.interp(grid, t[ok], self.values[ok]), self.tau0, float(t[0]), grid)


class AdevPoint(NamedTuple):
    tau: float
    m: int
    adev: float
    lower: float
    upper: float
    edf: float


def max_factor(n: int) -> int:
    return (n - 1) // 2


def overlapping_adev(values: np.ndarray | StabilitySeries, m: int, normalize: bool = False) -> float:
    """Overlapping Allan deviation at averaging factor ``m``.

    sigma^2 = sum_{j=0}^{M-2m} (sum_{i=j}^{j+m-1} (y[i+m] - y[i]))^2 / (2 m^2 (M - 2m + 1))
    """
    y = values.values if isinstance(values, StabilitySeries) else np.asarray(values, float)
    M = len(y)
    if not 1 <= m <= max_factor(M):
        raise StabilityError(f"averaging factor m={m} outside [1, {max_factor(M)}] for {M} samples")
    if normalize:
        mean = y.mean()
        if mean == 0:
            raise StabilityError("cannot normalize a zero-mean series")
        y = y / mean
    y = y - y[0]  # offset-free; keeps constant series exactly zero
    c = np.concatenate([[0.0], np.cumsum(y)])
    j = np.arange(M - 2 * m + 1)
    inner = c[j + 2 * m] - 2 * c[j + m] + c[j]
    return math.sqrt(float(inner @ inner) / (2.0 * m * m * (M - 2 * m + 1)))


def edf_white_fm(m: int, M: int) -> float:
    """Equivalent degrees of freedom of the overlapping estimator for white FM noise."""
    return (3.0 * (M - 1) / (2.0 * m) - 2.0 * (M - 2) / M) * 4.0 * m * m / (4.0 * m * m + 5.0)


def adev_confidence(adev: float, m: int, M: int, confidence: float = ONE_SIGMA) -> tuple[float, float]:
    """Chi-square interval around ``adev``; returns ``(lower, upper)``."""
    if not 0 < confidence < 1:
        raise StabilityError("confidence must be in (0, 1)")
    edf = edf_white_fm(m, M)
    if edf < 1:
        raise StabilityError(f"insufficient data at m={m}: edf={edf:.3g} < 1")
    var = adev * adev
    lower = var * edf / chi2.ppf(0.5 * (1 + confidence), edf)
    upper = var * edf / chi2.ppf(0.5 * (1 - confidence), edf)
    return math.sqrt(lower), math.sqrt(upper)


def averaging_factors(M: int, grid: str = "octave", include_endpoint: bool = True) -> list[int]:
    """Averaging factors for a curve: powers of two (plus the largest valid m), or every m."""
    top = max_factor(M)
    if top < 1:
        return []
    if grid == "dense":
        return list(range(1, top + 1))
    if grid != "octave":
        raise StabilityError(f"unknown grid {grid!r}")
    ms = [1 << k for k in range(top.bit_length()) if 1 << k <= top]
    if include_endpoint and ms[-1] != top:
        ms.append(top)
    return ms


def adev_curve(series: StabilitySeries, normalize: bool = False, grid: str = "octave",
               confidence: float = ONE_SIGMA, include_endpoint: bool = True,
               interpolate_gaps: bool = False) -> list[AdevPoint]:
    s = series.regularized(interpolate_gaps)
    if s.size < 8:
        raise StabilityError(f"an ADEV curve needs at least 8 samples, got {s.size}")
    out = []
    for m in averaging_factors(s.size, grid, include_endpoint):
        a = overlapping_adev(s.values, m, normalize)
        lo, hi = adev_confidence(a, m, s.size, confidence)
        out.append(AdevPoint(m * s.tau0, m, a, lo, hi, edf_white_fm(m, s.size)))
    return out


def adev_at(series: StabilitySeries, tau: float, normalize: bool = False) -> AdevPoint:
    """ADEV at the averaging factor closest to ``tau``."""
    m = max(1, int(round(tau / series.tau0)))
    a = overlapping_adev(series.values, m, normalize)
    lo, hi = adev_confidence(a, m, series.size)
    return AdevPoint(m * series.tau0, m, a, lo, hi, edf_white_fm(m, series.size))


def read_series_csv(fh: IO[str], column: str | None = None, tau0: float | None = None) -> StabilitySeries:
    """Read ``timestamp, value`` rows (or a named ``column`` of a wider CSV).

    ``tau0`` defaults to the median timestamp spacing.
    """
    reader = csv.DictReader(fh)
    if not reader.fieldnames or len(reader.fieldnames) < 2:
        raise StabilityError("series CSV needs a header with a timestamp and a value column")
    tcol = reader.fieldnames[0]
    vcol = column or ("value" if "value" in reader.fieldnames else reader.fieldnames[1])
    if vcol not in reader.fieldnames:
        raise StabilityError(f"column {vcol!r} not in {reader.fieldnames}")
    t, v = [], []
    for row in reader:
        t.append(float(row[tcol]))
        v.append(float(row[vcol]) if row[vcol] not in ("", "nan", "NaN") else math.nan)
    t_arr = np.array(t)
    if tau0 is None:
        if len(t_arr) < 2:
            raise StabilityError("cannot infer tau0 from fewer than 2 samples")
        tau0 = float(np.median(np.diff(t_arr)))
    return StabilitySeries(np.array(v), tau0, float(t_arr[0]) if len(t_arr) else 0.0, t_arr)


def write_curve_csv(curve: list[AdevPoint], fh: IO[str]) -> None:
    fh.write("tau_s,adev,ci_low,ci_high\n")
    for p in curve:
        fh.write(f"{p.tau!r},{p.adev!r},{p.lower!r},{p.upper!r}\n")
