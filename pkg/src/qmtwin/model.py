"""Domain types, calibration constants and detection-window geometry.

All times are integer picoseconds in the per-shot frame whose origin is the
centre of the write-in control pulse (``t_0 = 0``).  Rates are floats in Hz,
integration times floats in seconds.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_S = 1_000_000_000_000

#: sigma = fwhm * FWHM_TO_SIGMA for a Gaussian
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class ConfigError(ValueError):
    """Invalid configuration.  ``errors`` lists every violated constraint."""

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def ns(value: float) -> int:
    """Nanoseconds to integer picoseconds."""
    return int(round(value * PS_PER_NS))


def period_from_rate(f_rep: float) -> int:
    """Shot period in ps for a repetition rate in Hz."""
    return int(round(PS_PER_S / f_rep))


def shot_count(f_rep: float, t_int: float) -> int:
    """floor(f_rep * t_int), evaluated on the mHz / ms integers stored in tag files."""
    return (int(round(f_rep * 1000)) * int(round(t_int * 1000))) // 1_000_000


@dataclass(frozen=True)
class SequenceTiming:
    pump_duration: int = 30 * PS_PER_US
    pump_settle: int = 250 * PS_PER_NS
    write_center_t0: int = 0
    signal_delay_td: int = 5 * PS_PER_NS
    storage_time_tst: int = 150 * PS_PER_NS
    readout_window: int = 500 * PS_PER_NS
    shot_period: int = period_from_rate(31e3)

    @property
    def retrieval_time(self) -> int:
        return self.write_center_t0 + self.storage_time_tst

    @property
    def frame_start(self) -> int:
        """Start of the shot in the per-shot frame (beginning of the pump pulse)."""
        return self.write_center_t0 - self.pump_settle - self.pump_duration

    @property
    def frame_end(self) -> int:
        return self.frame_start + self.shot_period


@dataclass(frozen=True)
class PulseSpec:
    center: int
    fwhm: int
    mean_area: float = 0.0
    shape: str = "gaussian"

    @property
    def sigma(self) -> float:
        return self.fwhm * FWHM_TO_SIGMA


@dataclass(frozen=True)
class Calibration:
    """Detector and beam-path calibration with one-sigma systematic uncertainties."""

    theta: float = 11.2
    theta_sd: float = 0.4
    eta_apd_mon: float = 0.36
    eta_apd_mon_sd: float = 0.05
    eta_apd_sig: float = 0.30
    eta_apd_sig_sd: float = 0.05
    eta_setup: float = 0.23
    eta_setup_sd: float = 0.01

    def without_systematics(self) -> Calibration:
        return dataclasses.replace(
            self, theta_sd=0.0, eta_apd_mon_sd=0.0, eta_apd_sig_sd=0.0, eta_setup_sd=0.0
        )


@dataclass(frozen=True)
class SimTruth:
    """Ground truth fed to the simulator.

    ``leak_fraction=None`` means ``1 - eta_mem_zero``: whatever is not stored
    leaks straight through at t_0.  ``retrieval_offset_fwhm`` places the
    retrieved pulse at ``t_st - offset * fwhm``; 2.3 is the midpoint of the
    default signal window.
    """

    eta_mem_zero: float = 0.23
    lifetime_tau: int = 2400 * PS_PER_NS
    noise_mean_per_shot: float = 1.2e-3
    dark_rate: float = 0.0
    leak_fraction: float | None = None
    retrieval_offset_fwhm: float = 2.3
    noise_profile: str = "uniform"

    def eta_mem(self, storage_time: int) -> float:
        return self.eta_mem_zero * math.exp(-storage_time / self.lifetime_tau)

    @property
    def leak(self) -> float:
        return 1.0 - self.eta_mem_zero if self.leak_fraction is None else self.leak_fraction


@dataclass(frozen=True)
class DetectionWindow:
    """Half-open interval ``[start, end)`` of folded time, in ps."""

    start: int
    end: int

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigError(f"detection window needs start < end, got [{self.start}, {self.end})")

    @property
    def duration(self) -> int:
        return self.end - self.start

    def overlaps(self, other: DetectionWindow) -> bool:
        return self.start < other.end and other.start < self.end

    def __str__(self) -> str:
        return f"[{self.start / PS_PER_NS:g} ns, {self.end / PS_PER_NS:g} ns)"


@dataclass(frozen=True)
class WindowFactors:
    """Window bounds in units of the signal FWHM."""

    monitor_halfwidth: float = 4.0
    signal_start: float = 4.0
    signal_end: float = 0.6


def default_windows(
    timing: SequenceTiming,
    signal_fwhm: int,
    factors: WindowFactors = WindowFactors(),
) -> tuple[DetectionWindow, DetectionWindow]:
    """Monitor and signal detection windows.

    monitor = [t_0 - 4 fwhm, t_0 + 4 fwhm), signal = [t_st - 4 fwhm, t_st - 0.6 fwhm)
    with the default factors.  The signal window closes *before* t_st exactly as
    in the original analysis; both offsets can be changed through ``factors``.

    Raises:
        ConfigError: the windows overlap, or leave the part of the shot
            between the end of the pump pulse and the next pump pulse.
    """
    if signal_fwhm <= 0:
        raise ConfigError(f"signal fwhm must be > 0, got {signal_fwhm} ps")
    t0 = timing.write_center_t0
    tst = timing.retrieval_time
    half = int(round(factors.monitor_halfwidth * signal_fwhm))
    start = int(round(factors.signal_start * signal_fwhm))
    end = int(round(factors.signal_end * signal_fwhm))
    try:
        monitor = DetectionWindow(t0 - half, t0 + half)
        signal = DetectionWindow(tst - start, tst - end)
    except ConfigError as exc:
        raise ConfigError(f"degenerate detection window: {exc}") from None
    if monitor.overlaps(signal):
        raise ConfigError(f"signal window {signal} overlaps monitor window {monitor}")
    if monitor.start < t0 - timing.pump_settle:
        raise ConfigError(f"monitor window {monitor} starts before the pump is off")
    if signal.end > timing.frame_end:
        raise ConfigError(f"signal window {signal} runs past the shot period")
    return monitor, signal


def _default_signal() -> PulseSpec:
    return PulseSpec(center=5 * PS_PER_NS, fwhm=10 * PS_PER_NS, mean_area=1.0)


def _default_write() -> PulseSpec:
    # mean_area carries the peak power in mW for control pulses
    return PulseSpec(center=0, fwhm=25 * PS_PER_NS, mean_area=5.0)


def _default_read() -> PulseSpec:
    return PulseSpec(center=150 * PS_PER_NS, fwhm=25 * PS_PER_NS, mean_area=5.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete parameter set of one storage run (defaults: long-duration operation)."""

    timing: SequenceTiming = field(default_factory=SequenceTiming)
    signal_pulse: PulseSpec = field(default_factory=_default_signal)
    control_write: PulseSpec = field(default_factory=_default_write)
    control_read: PulseSpec = field(default_factory=_default_read)
    f_rep: float = 31e3
    t_int: float = 20.0
    mu_in_target: float = 1.0
    detuning: float = 1.5e9
    cell_temperature: float = 75.0
    calibration: Calibration = field(default_factory=Calibration)
    truth: SimTruth = field(default_factory=SimTruth)
    windows: WindowFactors = field(default_factory=WindowFactors)

    @property
    def n_shots(self) -> int:
        return shot_count(self.f_rep, self.t_int)

    def detection_windows(self) -> tuple[DetectionWindow, DetectionWindow]:
        return default_windows(self.timing, self.signal_pulse.fwhm, self.windows)

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def _check_probability(errors: list[str], name: str, value: float, closed_low: bool = False) -> None:
    ok = (0.0 <= value <= 1.0) if closed_low else (0.0 < value <= 1.0)
    if not ok:
        bound = "[0,1]" if closed_low else "(0,1]"
        errors.append(f"{name}: probability must be in {bound}, got {value}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise ConfigError listing all violations."""
    errors: list[str] = []
    tm = cfg.timing
    for name in ("pump_duration", "pump_settle", "signal_delay_td", "storage_time_tst", "readout_window"):
        if getattr(tm, name) < 0:
            errors.append(f"timing.{name}: must be non-negative, got {getattr(tm, name)} ps")
    if tm.shot_period <= 0:
        errors.append(f"timing.shot_period: must be positive, got {tm.shot_period} ps")
    budget = tm.pump_duration + tm.pump_settle + tm.storage_time_tst + tm.readout_window
    if budget >= tm.shot_period:
        errors.append(
            f"timing: pump + settle + storage + read-out = {budget} ps does not fit in shot_period {tm.shot_period} ps"
        )
    if tm.storage_time_tst <= cfg.signal_pulse.fwhm:
        errors.append("timing.storage_time_tst: must exceed the signal pulse FWHM")

    for name in ("signal_pulse", "control_write", "control_read"):
        pulse: PulseSpec = getattr(cfg, name)
        if pulse.fwhm <= 0:
            errors.append(f"{name}.fwhm: must be > 0, got {pulse.fwhm} ps")
        if pulse.shape != "gaussian":
            errors.append(f"{name}.shape: only 'gaussian' is supported, got {pulse.shape!r}")
    if cfg.signal_pulse.mean_area < 0:
        errors.append("signal_pulse.mean_area: must be >= 0")

    if not cfg.f_rep > 0:
        errors.append(f"f_rep: must be > 0, got {cfg.f_rep}")
    if not cfg.t_int > 0:
        errors.append(f"t_int: must be > 0, got {cfg.t_int}")
    if cfg.f_rep > 0 and cfg.t_int > 0:
        if cfg.f_rep * cfg.t_int < 1 or cfg.n_shots < 1:
            errors.append(f"f_rep * t_int = {cfg.f_rep * cfg.t_int:g}: fewer than one shot")
        if tm.shot_period > 0 and abs(tm.shot_period - PS_PER_S / cfg.f_rep) > 1.0:
            errors.append(f"timing.shot_period {tm.shot_period} ps does not match f_rep {cfg.f_rep} Hz")
    if cfg.mu_in_target < 0:
        errors.append(f"mu_in_target: must be >= 0, got {cfg.mu_in_target}")

    cal = cfg.calibration
    if not cal.theta >= 1.0:
        errors.append(f"calibration.theta: must be >= 1, got {cal.theta}")
    for name in ("eta_apd_mon", "eta_apd_sig", "eta_setup"):
        _check_probability(errors, f"calibration.{name}", getattr(cal, name))
    for name in ("theta_sd", "eta_apd_mon_sd", "eta_apd_sig_sd", "eta_setup_sd"):
        if getattr(cal, name) < 0:
            errors.append(f"calibration.{name}: must be >= 0")

    tr = cfg.truth
    _check_probability(errors, "truth.eta_mem_zero", tr.eta_mem_zero, closed_low=True)
    if tr.leak_fraction is not None:
        _check_probability(errors, "truth.leak_fraction", tr.leak_fraction, closed_low=True)
    if tr.lifetime_tau <= 0:
        errors.append(f"truth.lifetime_tau: must be > 0, got {tr.lifetime_tau} ps")
    if tr.noise_mean_per_shot < 0:
        errors.append("truth.noise_mean_per_shot: must be >= 0")
    if tr.dark_rate < 0:
        errors.append("truth.dark_rate: must be >= 0")
    if tr.noise_profile not in ("uniform", "gaussian"):
        errors.append(f"truth.noise_profile: must be 'uniform' or 'gaussian', got {tr.noise_profile!r}")

    if cfg.signal_pulse.fwhm > 0 and tm.shot_period > 0:
        try:
            cfg.detection_windows()
        except ConfigError as exc:
            errors.extend(f"windows: {e}" for e in exc.errors)

    if errors:
        raise ConfigError(errors)
    return cfg


# -- JSON mirror -------------------------------------------------------------

_TIMING_KEYS = {
    "pump_duration_ns": "pump_duration",
    "pump_settle_ns": "pump_settle",
    "write_center_t0_ns": "write_center_t0",
    "signal_delay_td_ns": "signal_delay_td",
    "storage_time_tst_ns": "storage_time_tst",
    "readout_window_ns": "readout_window",
    "shot_period_ns": "shot_period",
}
_PULSE_KEYS = {"shape": "shape", "center_ns": "center", "fwhm_ns": "fwhm", "mean_area": "mean_area"}
_TRUTH_KEYS = {
    "eta_mem_zero": "eta_mem_zero",
    "lifetime_tau_ns": "lifetime_tau",
    "noise_mean_per_shot": "noise_mean_per_shot",
    "dark_rate_hz": "dark_rate",
    "leak_fraction": "leak_fraction",
    "retrieval_offset_fwhm": "retrieval_offset_fwhm",
    "noise_profile": "noise_profile",
}
_TOP_KEYS = {
    "f_rep_hz": "f_rep",
    "t_int_s": "t_int",
    "mu_in_target": "mu_in_target",
    "detuning_hz": "detuning",
    "cell_temperature_c": "cell_temperature",
}
_NS_FIELDS = {
    "pump_duration", "pump_settle", "write_center_t0", "signal_delay_td", "storage_time_tst",
    "readout_window", "shot_period", "center", "fwhm", "lifetime_tau",
}


def _to_json_section(obj: Any, keys: Mapping[str, str]) -> dict[str, Any]:
    out = {}
    for key, attr in keys.items():
        value = getattr(obj, attr)
        out[key] = value / PS_PER_NS if attr in _NS_FIELDS else value
    return out


def _from_json_section(data: Mapping[str, Any], keys: Mapping[str, str], section: str,
                       errors: list[str]) -> dict[str, Any]:
    kwargs = {}
    for key, value in data.items():
        if key not in keys:
            errors.append(f"{section}: unknown field {key!r}")
            continue
        attr = keys[key]
        kwargs[attr] = ns(value) if attr in _NS_FIELDS and value is not None else value
    return kwargs


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """JSON-ready mirror of ``cfg``; units are part of each key name."""
    out: dict[str, Any] = {"timing": _to_json_section(cfg.timing, _TIMING_KEYS)}
    for name in ("signal_pulse", "control_write", "control_read"):
        out[name] = _to_json_section(getattr(cfg, name), _PULSE_KEYS)
    out.update(_to_json_section(cfg, _TOP_KEYS))
    out["calibration"] = dataclasses.asdict(cfg.calibration)
    out["truth"] = _to_json_section(cfg.truth, _TRUTH_KEYS)
    w = cfg.windows
    out["windows"] = {
        "monitor_halfwidth_fwhm": w.monitor_halfwidth,
        "signal_start_fwhm": w.signal_start,
        "signal_end_fwhm": w.signal_end,
    }
    return out


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config from its JSON mirror.  Missing fields take their defaults.

    ``timing.shot_period_ns`` is derived from ``f_rep_hz`` when absent.
    Structural problems raise ConfigError; value constraints are left to
    :func:`validate_config`.
    """
    errors: list[str] = []
    sections = {"timing", "signal_pulse", "control_write", "control_read", "calibration", "truth", "windows"}
    for key in data:
        if key not in sections and key not in _TOP_KEYS:
            errors.append(f"unknown field {key!r}")
    for key in sections & set(data):
        if not isinstance(data[key], Mapping):
            errors.append(f"{key}: expected an object")
    if errors:
        raise ConfigError(errors)

    top = _from_json_section({k: v for k, v in data.items() if k in _TOP_KEYS}, _TOP_KEYS, "config", errors)
    timing_kw = _from_json_section(data.get("timing", {}), _TIMING_KEYS, "timing", errors)
    if "shot_period" not in timing_kw:
        f_rep = top.get("f_rep", ExperimentConfig.f_rep)
        if isinstance(f_rep, (int, float)) and f_rep > 0:
            timing_kw["shot_period"] = period_from_rate(f_rep)
    pulses = {
        name: _from_json_section(data.get(name, {}), _PULSE_KEYS, name, errors)
        for name in ("signal_pulse", "control_write", "control_read")
    }
    cal_fields = {f.name for f in dataclasses.fields(Calibration)}
    cal_kw = _from_json_section(data.get("calibration", {}), {k: k for k in cal_fields}, "calibration", errors)
    truth_kw = _from_json_section(data.get("truth", {}), _TRUTH_KEYS, "truth", errors)
    win_keys = {
        "monitor_halfwidth_fwhm": "monitor_halfwidth",
        "signal_start_fwhm": "signal_start",
        "signal_end_fwhm": "signal_end",
    }
    win_kw = _from_json_section(data.get("windows", {}), win_keys, "windows", errors)
    if errors:
        raise ConfigError(errors)

    defaults = {
        "signal_pulse": _default_signal(),
        "control_write": _default_write(),
        "control_read": _default_read(),
    }
    try:
        return ExperimentConfig(
            timing=SequenceTiming(**timing_kw),
            **{name: dataclasses.replace(defaults[name], **kw) for name, kw in pulses.items()},
            calibration=Calibration(**cal_kw),
            truth=SimTruth(**truth_kw),
            windows=WindowFactors(**win_kw),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike[str]) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2)
