"""Tag files in, metrics out: fold both APD channels, count the windows, apply the formulas."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricsError, MetricsResult, WindowCounts, compute_metrics
from .model import DetectionWindow, ExperimentConfig
from .tagstream import (
    CHANNEL_NAMES, DEFAULT_BIN_WIDTH, MONITOR, SIGNAL, SYNC, FoldedHistogram, Source, TagHeader,
    bin_folded, fold_times, read_tag_array, window_sum,
)


class DataError(ValueError):
    """The tag data cannot support the requested analysis."""


@dataclass
class RunCounts:
    header: TagHeader
    n_syncs: int
    N_mon: int
    N_sig: int
    monitor_hist: FoldedHistogram
    signal_hist: FoldedHistogram
    digest: str


@dataclass
class Analysis:
    counts: WindowCounts
    metrics: MetricsResult
    windows: tuple[DetectionWindow, DetectionWindow]
    signal_run: RunCounts
    vacuum_run: RunCounts | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        mon, sig = self.windows
        out = {
            "metrics": self.metrics.to_dict(),
            "counts": {
                "N_mon": self.counts.N_mon,
                "N_sig": self.counts.N_sig,
                "N_noi": self.counts.N_noi,
                "f_rep_hz": self.counts.f_rep,
                "t_int_s": self.counts.t_int,
            },
            "windows_ps": {"monitor": [mon.start, mon.end], "signal": [sig.start, sig.end]},
            "signal_run": _run_dict(self.signal_run),
            "flags": sorted(set(self.flags) | set(self.metrics.flags)),
        }
        if self.vacuum_run is not None:
            out["vacuum_run"] = _run_dict(self.vacuum_run)
        return out


def _run_dict(run: RunCounts) -> dict:
    return {
        "sha256": run.digest,
        "n_syncs": run.n_syncs,
        "expected_shots": run.header.n_shots,
        "monitor_orphans": run.monitor_hist.orphans,
        "signal_orphans": run.signal_hist.orphans,
        "signal_out_of_span": run.signal_hist.dropped,
    }


def analysis_frame(cfg: ExperimentConfig, windows: tuple[DetectionWindow, DetectionWindow],
                   bin_width: int = DEFAULT_BIN_WIDTH) -> tuple[int, int]:
    """Histogram ``(origin, span)``: from the pump switching off to 4 FWHM past the last window."""
    start = min(cfg.timing.write_center_t0 - cfg.timing.pump_settle, *(w.start for w in windows))
    end = max(w.end for w in windows) + 4 * cfg.signal_pulse.fwhm
    origin = start // bin_width * bin_width
    return origin, end - origin


def count_run(source: Source | tuple[TagHeader, np.ndarray], cfg: ExperimentConfig,
              windows: tuple[DetectionWindow, DetectionWindow],
              bin_width: int = DEFAULT_BIN_WIDTH) -> RunCounts:
    """Fold one run and sum both detection windows."""
    if isinstance(source, tuple):
        header, records = source
        digest = hashlib.sha256(header.pack() + records.tobytes()).hexdigest()
    else:
        raw = _read_bytes(source)
        header, records = read_tag_array(raw)
        digest = hashlib.sha256(raw).hexdigest()
    for ch in (SYNC, SIGNAL, MONITOR):
        if ch >= header.n_channels:
            raise DataError(f"channel {ch} ({CHANNEL_NAMES[ch]}) missing: file declares {header.n_channels} channels")
    if not np.any(records["channel"] == SYNC):
        raise DataError(f"channel {SYNC} (sync) has no records")
    mon_w, sig_w = windows
    origin, span = analysis_frame(cfg, windows, bin_width)
    mon_t, mon_orphans, n_syncs = fold_times(records, SYNC, MONITOR, origin)
    sig_t, sig_orphans, _ = fold_times(records, SYNC, SIGNAL, origin)
    return RunCounts(
        header=header,
        n_syncs=n_syncs,
        N_mon=window_sum(mon_t, mon_w),
        N_sig=window_sum(sig_t, sig_w),
        monitor_hist=bin_folded(mon_t, bin_width, span, origin, n_syncs, MONITOR, mon_orphans),
        signal_hist=bin_folded(sig_t, bin_width, span, origin, n_syncs, SIGNAL, sig_orphans),
        digest=digest,
    )


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def analyze(tags: Source | tuple[TagHeader, np.ndarray], cfg: ExperimentConfig,
            windows: tuple[DetectionWindow, DetectionWindow] | None = None,
            vacuum: Source | tuple[TagHeader, np.ndarray] | None = None,
            n_noi: int | None = None, bin_width: int = DEFAULT_BIN_WIDTH) -> Analysis:
    """Full characterization of a storage run.

    The noise total comes from a vacuum run folded with the same windows,
    or from an explicit ``n_noi``.  ``f_rep`` and ``t_int`` are taken from
    the signal file header; a vacuum run of different length is rescaled to
    the signal run's shot count (flag ``"vacuum_rescaled"``).
    """
    if vacuum is None and n_noi is None:
        raise MetricsError("noise cannot be inferred: supply a vacuum run or N_noi")
    if windows is None:
        windows = cfg.detection_windows()
    run = count_run(tags, cfg, windows, bin_width)
    flags = []
    vac_run = None
    if vacuum is not None:
        vac_run = count_run(vacuum, cfg, windows, bin_width)
        n_noi = vac_run.N_sig
        if vac_run.header.n_shots != run.header.n_shots:
            if vac_run.header.n_shots == 0:
                raise DataError("vacuum run has no shots")
            n_noi = int(round(n_noi * run.header.n_shots / vac_run.header.n_shots))
            flags.append("vacuum_rescaled")
    if run.n_syncs != run.header.n_shots:
        flags.append("sync_count_mismatch")
    counts = WindowCounts(run.N_mon, run.N_sig, int(n_noi), run.header.f_rep, run.header.t_int)
    return Analysis(counts, compute_metrics(counts, cfg.calibration), windows, run, vac_run, flags)
