"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 data error.
Outputs are written atomically (temporary file, then rename).
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .analysis import DataError, analyze
from .fitting import FitError, fit_exponential, read_points_csv
from .metrics import MetricsError, WindowCounts, compute_metrics
from .model import (
    ConfigError, DetectionWindow, ExperimentConfig, config_from_dict, config_to_dict, dump_config,
    load_config, ns, validate_config,
)
from .simulator import simulate_run, write_campaign
from .stability import StabilityError, StabilitySeries, adev_at, adev_curve, read_series_csv, write_curve_csv
from .tagstream import TagFormatError
from .threshold import classical_threshold, threshold_strata

log = logging.getLogger("qmtwin")

EXIT_USAGE = 2
EXIT_DATA = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _atomic_write(path: str, data: str | bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, f".{os.path.basename(path)}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _load_config(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise CliError(f"config file not found: {path}")
    try:
        return validate_config(load_config(path))
    except ConfigError as exc:
        raise CliError("invalid configuration:\n  " + "\n  ".join(exc.errors)) from None


def _emit(text: str, out: str | None) -> None:
    if out:
        _atomic_write(out, text)
    else:
        sys.stdout.write(text)


# -- simulate ----------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.vacuum:
        cfg = cfg.replace(mu_in_target=0.0)
    if args.campaign is not None:
        if args.campaign < 2:
            raise CliError("--campaign needs at least 2 points")
        manifest = write_campaign(cfg, args.campaign, args.cadence_s, args.out, drift=args.drift,
                                  seed=args.seed, mode=args.campaign_mode)
        log.info("campaign of %d points written to %s", len(manifest["points"]), args.out)
        return 0
    data = simulate_run(cfg, args.seed, workers=args.workers)
    manifest = {"seed": args.seed, "n_shots": cfg.n_shots, "config": config_to_dict(cfg)}
    _atomic_write(args.out, data)
    _atomic_write(args.out + ".manifest.json", json.dumps(manifest, indent=2))
    log.info("%d shots, %d bytes written to %s", cfg.n_shots, len(data), args.out)
    return 0


# -- analyze -----------------------------------------------------------------

def _parse_windows(text: str) -> tuple[DetectionWindow, DetectionWindow]:
    try:
        a, b, c, d = (float(v) for v in text.split(","))
        return DetectionWindow(ns(a), ns(b)), DetectionWindow(ns(c), ns(d))
    except (ValueError, ConfigError) as exc:
        raise CliError(f"--windows expects mon_start,mon_end,sig_start,sig_end in ns: {exc}") from None


def _hist_csv(hist, bin_ps: int) -> str:
    if bin_ps % hist.bin_width:
        raise CliError(f"--hist-bin-ps must be a multiple of {hist.bin_width}")
    buf = io.StringIO()
    hist.rebin(bin_ps // hist.bin_width).to_csv(buf)
    return buf.getvalue()


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    windows = _parse_windows(args.windows) if args.windows else None
    if args.vacuum is None and args.n_noi is None:
        raise CliError("either --vacuum or --n-noi is required")
    for path in (args.tags, args.vacuum):
        if path is not None and not os.path.isfile(path):
            raise CliError(f"tag file not found: {path}")
    try:
        result = analyze(args.tags, cfg, windows=windows, vacuum=args.vacuum, n_noi=args.n_noi)
    except (DataError, TagFormatError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    doc = result.to_dict()
    doc["windows_custom"] = windows is not None
    text = json.dumps(doc, indent=2)
    os.makedirs(args.out_dir, exist_ok=True)
    _atomic_write(os.path.join(args.out_dir, "metrics.json"), text + "\n")
    _atomic_write(os.path.join(args.out_dir, "histogram_signal.csv"), _hist_csv(result.signal_run.signal_hist, args.hist_bin_ps))
    _atomic_write(os.path.join(args.out_dir, "histogram_monitor.csv"), _hist_csv(result.signal_run.monitor_hist, args.hist_bin_ps))
    sys.stdout.write(text + "\n")
    return 0


# -- adev --------------------------------------------------------------------

def cmd_adev(args: argparse.Namespace) -> int:
    try:
        with open(args.series, encoding="utf-8") as fh:
            series = read_series_csv(fh, args.column, args.tau0_s)
    except FileNotFoundError:
        raise CliError(f"series file not found: {args.series}") from None
    try:
        curve = adev_curve(series, normalize=args.normalize, grid=args.grid,
                           interpolate_gaps=args.interpolate_gaps)
    except StabilityError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    buf = io.StringIO()
    write_curve_csv(curve, buf)
    _emit(buf.getvalue(), args.out)
    return 0


# -- fit-lifetime ------------------------------------------------------------

def cmd_fit_lifetime(args: argparse.Namespace) -> int:
    try:
        with open(args.points, encoding="utf-8") as fh:
            points = read_points_csv(fh)
    except FileNotFoundError:
        raise CliError(f"points file not found: {args.points}") from None
    except FitError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    if len(points) < 3:
        raise CliError(f">= 3 points required, got {len(points)}")
    try:
        fit = fit_exponential(points, weighted=not args.unweighted)
    except FitError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    _emit(json.dumps(fit.to_dict(), indent=2) + "\n", args.out)
    return 0


# -- threshold ---------------------------------------------------------------

def cmd_threshold(args: argparse.Namespace) -> int:
    try:
        value = classical_threshold(args.mu, args.eta, args.n_max)
        strata = threshold_strata(args.mu, args.eta, args.n_max)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    doc = {
        "mu": args.mu,
        "eta_accept": args.eta,
        "classical_threshold": value,
        "strata": [s._asdict() for s in strata],
    }
    _emit(json.dumps(doc, indent=2) + "\n", args.out)
    return 0


# -- report ------------------------------------------------------------------

REPORT_COLUMNS = ("timestamp", "mu_in", "eta_e2e", "snr", "mu_1", "F", "F_class")


def _campaign_counts(directory: str, manifest: dict, cfg: ExperimentConfig,
                     workers: int) -> list[tuple[float, WindowCounts]]:
    if manifest.get("mode") == "counts":
        path = os.path.join(directory, manifest.get("counts_file", "counts.csv"))
        rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
        rows = np.atleast_1d(rows)
        return [
            (float(r["offset_s"]), WindowCounts(int(r["n_mon"]), int(r["n_sig"]), int(r["n_noi"]),
                                                float(r["f_rep_hz"]), float(r["t_int_s"])))
            for r in rows
        ]

    def one(entry: dict) -> tuple[float, WindowCounts]:
        a = analyze(os.path.join(directory, entry["tags"]), cfg,
                    vacuum=os.path.join(directory, entry["vacuum"]))
        return float(entry["offset_s"]), a.counts

    with ThreadPoolExecutor(max(1, workers)) as pool:
        return list(pool.map(one, manifest["points"]))


def _adev_section(times: np.ndarray, values: np.ndarray, cadence: float) -> dict:
    series = StabilitySeries(values, cadence, float(times[0]), times)
    if series.size < 8:
        return {"available": False, "reason": f"{series.size} points; at least 8 are needed"}
    out: dict = {"available": True}
    try:
        for mode, normalize in (("absolute", False), ("fractional", True)):
            curve = adev_curve(series, normalize=normalize)
            out[mode] = [p._asdict() for p in curve]
            if 3600.0 / cadence <= (series.size - 1) // 2:
                out[f"{mode}_sigma_1h"] = adev_at(series, 3600.0, normalize)._asdict()
    except StabilityError as exc:
        return {"available": False, "reason": str(exc)}
    return out


def cmd_report(args: argparse.Namespace) -> int:
    directory = args.campaign_dir
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.isdir(directory) or not os.path.isfile(manifest_path):
        raise CliError(f"no campaign manifest in {directory}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if not manifest.get("points"):
        raise CliError(f"campaign in {directory} has no points")
    try:
        cfg = validate_config(config_from_dict(manifest["config"]))
    except ConfigError as exc:
        raise CliError("invalid configuration in manifest:\n  " + "\n  ".join(exc.errors)) from None
    try:
        points = _campaign_counts(directory, manifest, cfg, args.workers)
    except (DataError, TagFormatError, OSError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None

    rows = []
    for t, counts in points:
        m = compute_metrics(counts, cfg.calibration)
        rows.append((t, m.mu_in.value, m.eta_e2e.value, m.snr.value, m.mu_1.value,
                     m.fidelity.value, m.threshold_e2e))
    table = np.array(rows, float)
    lines = [",".join(REPORT_COLUMNS)]
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    out_dir = args.out_dir or directory
    _atomic_write(os.path.join(out_dir, "campaign_metrics.csv"), "\n".join(lines) + "\n")

    cadence = float(manifest.get("cadence_s") or (np.median(np.diff(table[:, 0])) if len(table) > 1 else 1.0))
    summary: dict = {"n_points": len(rows), "cadence_s": cadence, "span_h": float(table[-1, 0] - table[0, 0]) / 3600}
    for col, name in enumerate(REPORT_COLUMNS[1:], start=1):
        vals = table[:, col]
        finite = vals[np.isfinite(vals)]
        summary[name] = {
            "mean": float(finite.mean()) if len(finite) else math.nan,
            "sd": float(finite.std(ddof=1)) if len(finite) > 1 else math.nan,
        }
    summary["fraction_above_classical"] = float(np.mean(table[:, 5] > table[:, 6]))
    summary["adev"] = {
        "eta_e2e": _adev_section(table[:, 0], table[:, 2], cadence),
        "F": _adev_section(table[:, 0], table[:, 5], cadence),
    }
    text = json.dumps(summary, indent=2, default=float)
    _atomic_write(os.path.join(out_dir, "campaign_summary.json"), text + "\n")
    sys.stdout.write(text + "\n")
    return 0


def cmd_default_config(args: argparse.Namespace) -> int:
    _emit(dump_config(ExperimentConfig()) + "\n", args.out)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmtwin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a run or a campaign")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="tag file, or directory with --campaign")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vacuum", action="store_true", help="zero input photons (noise reference run)")
    s.add_argument("--campaign", type=int, metavar="N")
    s.add_argument("--cadence-s", type=float, default=53.1)
    s.add_argument("--drift", type=float, default=0.0, help="per-step sd of the log random walk")
    s.add_argument("--campaign-mode", choices=("tags", "counts"), default="tags")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="metrics and histograms from a run and its vacuum reference")
    a.add_argument("--tags", required=True)
    a.add_argument("--vacuum")
    a.add_argument("--n-noi", type=int)
    a.add_argument("--config", required=True)
    a.add_argument("--windows", help="mon_start,mon_end,sig_start,sig_end in ns")
    a.add_argument("--out-dir", default=".")
    a.add_argument("--hist-bin-ps", type=int, default=5)
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("adev", help="overlapping Allan deviation curve of a time series")
    d.add_argument("--series", required=True)
    d.add_argument("--tau0-s", type=float)
    d.add_argument("--column")
    d.add_argument("--normalize", action="store_true", help="fractional deviation (divide by mean)")
    d.add_argument("--grid", choices=("octave", "dense"), default="octave")
    d.add_argument("--interpolate-gaps", action="store_true")
    d.add_argument("--out")
    d.set_defaults(func=cmd_adev)

    f = sub.add_parser("fit-lifetime", help="exponential fit of a storage-time scan")
    f.add_argument("--points", required=True)
    f.add_argument("--unweighted", action="store_true")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit_lifetime)

    t = sub.add_parser("threshold", help="classical fidelity threshold")
    t.add_argument("--mu", type=float, required=True)
    t.add_argument("--eta", type=float, required=True)
    t.add_argument("--n-max", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_threshold)

    r = sub.add_parser("report", help="aggregate a campaign directory")
    r.add_argument("--campaign-dir", required=True)
    r.add_argument("--out-dir")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("default-config", help="print the default configuration")
    c.add_argument("--out")
    c.set_defaults(func=cmd_default_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except CliError as exc:
        print(f"qmtwin {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (MetricsError, ConfigError) as exc:
        print(f"qmtwin {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
