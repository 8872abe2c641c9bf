"""Monte Carlo generator of time-tag streams for the storage sequence.

Every stage is linear loss acting on a coherent state, so each detector's
click count per shot is Poisson with the composed mean and is drawn
directly; no per-photon bookkeeping is needed.

Per-shot contributions, all in the frame where the write pulse sits at t_0:

========== ======= ===================================================
name       channel arrival times
========== ======= ===================================================
monitor    2       Gaussian at t_0, signal FWHM
retrieved  1       Gaussian at t_st - offset * FWHM, signal FWHM
leak       1       Gaussian at t_0, signal FWHM
noise      1       inside the signal window (uniform or truncated Gaussian)
dark       1       uniform over the whole shot
========== ======= ===================================================
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtr, ndtri

from .metrics import WindowCounts
from .model import PS_PER_S, ExperimentConfig, config_to_dict, validate_config
from .tagstream import MONITOR, SIGNAL, SYNC, TagHeader, make_records, write_tag_file

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]

CONTRIBUTIONS = ("monitor", "retrieved", "leak", "noise", "dark")
CHANNEL_OF = {"monitor": MONITOR, "retrieved": SIGNAL, "leak": SIGNAL, "noise": SIGNAL, "dark": SIGNAL}

SHOTS_PER_CHUNK = 1 << 16


@dataclass
class ShotOutcome:
    """Folded click times (ps) of one shot, per channel and per contribution."""

    monitor_clicks: list[int]
    signal_clicks: list[int]
    contributions: dict[str, list[int]] = field(default_factory=dict)


@dataclass
class ShotBatch:
    """Clicks of ``n_shots`` consecutive shots.

    ``shot[name]`` holds the shot index of every click of a contribution and
    ``times[name]`` its folded time.
    """

    n_shots: int
    shot: dict[str, np.ndarray]
    times: dict[str, np.ndarray]

    def counts(self, name: str) -> np.ndarray:
        return np.bincount(self.shot[name], minlength=self.n_shots)


def contribution_means(cfg: ExperimentConfig) -> dict[str, float]:
    """Mean detected clicks per shot for every contribution."""
    cal, truth, mu = cfg.calibration, cfg.truth, cfg.mu_in_target
    detected = cal.eta_setup * cal.eta_apd_sig
    return {
        "monitor": mu * cal.eta_apd_mon / cal.theta,
        "retrieved": mu * truth.eta_mem(cfg.timing.storage_time_tst) * detected,
        "leak": mu * truth.leak * detected,
        "noise": truth.noise_mean_per_shot,
        "dark": truth.dark_rate * cfg.timing.shot_period / PS_PER_S,
    }


def _gaussian_mass(center: float, sigma: float, lo: float, hi: float) -> float:
    return float(ndtr((hi - center) / sigma) - ndtr((lo - center) / sigma))


def expected_window_means(cfg: ExperimentConfig) -> tuple[float, float]:
    """Expected clicks per shot inside the (monitor, signal) detection windows."""
    means = contribution_means(cfg)
    monitor, signal = cfg.detection_windows()
    sigma = cfg.signal_pulse.sigma
    t0 = cfg.timing.write_center_t0
    n_mon = means["monitor"] * _gaussian_mass(t0, sigma, monitor.start, monitor.end)
    n_sig = (
        means["retrieved"] * _gaussian_mass(_retrieval_center(cfg), sigma, signal.start, signal.end)
        + means["leak"] * _gaussian_mass(t0, sigma, signal.start, signal.end)
        + means["noise"]
        + means["dark"] * signal.duration / cfg.timing.shot_period
    )
    return n_mon, n_sig


def _retrieval_center(cfg: ExperimentConfig) -> float:
    return cfg.timing.retrieval_time - cfg.truth.retrieval_offset_fwhm * cfg.signal_pulse.fwhm


def sample_shots(cfg: ExperimentConfig, n_shots: int, rng: np.random.Generator) -> ShotBatch:
    """Draw ``n_shots`` independent shots (vectorised core of the simulator)."""
    means = contribution_means(cfg)
    _, signal = cfg.detection_windows()
    tm = cfg.timing
    sigma = cfg.signal_pulse.sigma
    lo, hi = tm.frame_start, tm.frame_end - 1
    shot: dict[str, np.ndarray] = {}
    times: dict[str, np.ndarray] = {}
    for name in CONTRIBUTIONS:
        k = rng.poisson(means[name], size=n_shots) if means[name] > 0 else np.zeros(n_shots, np.int64)
        idx = np.repeat(np.arange(n_shots, dtype=np.int64), k)
        n = len(idx)
        if name in ("monitor", "leak"):
            t = rng.normal(tm.write_center_t0, sigma, n)
        elif name == "retrieved":
            t = rng.normal(_retrieval_center(cfg), sigma, n)
        elif name == "noise" and cfg.truth.noise_profile == "gaussian":
            mid = 0.5 * (signal.start + signal.end)
            a, b = ndtr((signal.start - mid) / sigma), ndtr((signal.end - mid) / sigma)
            t = mid + sigma * ndtri(rng.uniform(a, b, n))
        elif name == "noise":
            t = rng.uniform(signal.start, signal.end, n)
        else:
            t = rng.uniform(tm.frame_start, tm.frame_end, n)
        t = np.clip(np.floor(t), lo, hi).astype(np.int64)
        if name == "noise":
            t = np.clip(t, signal.start, signal.end - 1)
        shot[name] = idx
        times[name] = t
    return ShotBatch(n_shots, shot, times)


def simulate_shot(cfg: ExperimentConfig, rng: np.random.Generator) -> ShotOutcome:
    batch = sample_shots(cfg, 1, rng)
    contributions = {name: batch.times[name].tolist() for name in CONTRIBUTIONS}
    signal = sorted(t for name in CONTRIBUTIONS if CHANNEL_OF[name] == SIGNAL for t in contributions[name])
    return ShotOutcome(sorted(contributions["monitor"]), signal, contributions)


def _chunk_records(cfg: ExperimentConfig, first_shot: int, n_shots: int,
                   seed: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    batch = sample_shots(cfg, n_shots, rng)
    period = cfg.timing.shot_period
    lead = -cfg.timing.frame_start
    sync_ts = lead + (first_shot + np.arange(n_shots, dtype=np.int64)) * period
    ts = [sync_ts]
    ch = [np.full(n_shots, SYNC, np.uint16)]
    for name in CONTRIBUTIONS:
        ts.append(sync_ts[batch.shot[name]] + batch.times[name])
        ch.append(np.full(len(batch.shot[name]), CHANNEL_OF[name], np.uint16))
    ts_all = np.concatenate(ts)
    ch_all = np.concatenate(ch)
    order = np.lexsort((ch_all, ts_all))
    return make_records(ts_all[order], ch_all[order])


def _seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def simulate_records(cfg: ExperimentConfig, seed: SeedLike, workers: int = 1) -> tuple[TagHeader, np.ndarray]:
    """Simulate one run of ``floor(f_rep * t_int)`` shots.

    Shots are generated in fixed blocks of :data:`SHOTS_PER_CHUNK`, each with
    its own child of the seed sequence, so the result does not depend on
    ``workers``.
    """
    validate_config(cfg)
    header = TagHeader.from_rates(cfg.f_rep, cfg.t_int)
    n_shots = header.n_shots
    n_chunks = -(-n_shots // SHOTS_PER_CHUNK)
    children = _seed_sequence(seed).spawn(n_chunks)
    jobs = [
        (c * SHOTS_PER_CHUNK, min(SHOTS_PER_CHUNK, n_shots - c * SHOTS_PER_CHUNK), children[c])
        for c in range(n_chunks)
    ]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda job: _chunk_records(cfg, *job), jobs))
    else:
        parts = [_chunk_records(cfg, *job) for job in jobs]
    records = np.concatenate(parts) if parts else make_records(np.empty(0, np.int64), np.empty(0, np.uint16))
    return header, records


def simulate_run(cfg: ExperimentConfig, seed: SeedLike, workers: int = 1) -> bytes:
    """One run as a QTT1 byte string; identical (cfg, seed) give identical bytes."""
    header, records = simulate_records(cfg, seed, workers)
    return write_tag_file(records, header)


# -- campaigns ---------------------------------------------------------------

@dataclass
class CampaignPoint:
    index: int
    offset_s: float
    config: ExperimentConfig
    eta_factor: float = 1.0
    noise_factor: float = 1.0

    def manifest_entry(self) -> dict:
        return {
            "index": self.index,
            "offset_s": self.offset_s,
            "eta_mem_zero": self.config.truth.eta_mem_zero,
            "noise_mean_per_shot": self.config.truth.noise_mean_per_shot,
            "eta_factor": self.eta_factor,
            "noise_factor": self.noise_factor,
        }


def campaign_points(cfg: ExperimentConfig, n_points: int, cadence: float, drift: float,
                    rng: np.random.Generator) -> list[CampaignPoint]:
    """Per-point configurations with an optional slow drift.

    ``drift`` is the per-step sd of a log-normal random walk applied
    independently to ``eta_mem_zero`` and ``noise_mean_per_shot``.
    """
    if n_points < 2:
        raise ValueError("a campaign needs at least 2 points")
    if drift > 0:
        steps = rng.normal(0.0, drift, size=(2, n_points))
        steps[:, 0] = 0.0
        eta_f, noise_f = np.exp(np.cumsum(steps, axis=1))
    else:
        eta_f = noise_f = np.ones(n_points)
    points = []
    for k in range(n_points):
        truth = dataclasses.replace(
            cfg.truth,
            eta_mem_zero=min(1.0, cfg.truth.eta_mem_zero * float(eta_f[k])),
            noise_mean_per_shot=cfg.truth.noise_mean_per_shot * float(noise_f[k]),
        )
        points.append(CampaignPoint(k, k * cadence, cfg.replace(truth=truth), float(eta_f[k]), float(noise_f[k])))
    return points


def simulate_window_counts(cfg: ExperimentConfig, rng: np.random.Generator) -> WindowCounts:
    """Draw the window totals of one signal run and its vacuum reference directly.

    A sum of independent Poisson counts is Poisson, so this has the same
    distribution as folding a full simulated tag stream, at a tiny fraction
    of the cost.
    """
    n = cfg.n_shots
    n_mon, n_sig = expected_window_means(cfg)
    _, n_noi = expected_window_means(cfg.replace(mu_in_target=0.0))
    return WindowCounts(
        N_mon=int(rng.poisson(n * n_mon)),
        N_sig=int(rng.poisson(n * n_sig)),
        N_noi=int(rng.poisson(n * n_noi)),
        f_rep=cfg.f_rep,
        t_int=cfg.t_int,
    )


@dataclass
class Campaign:
    points: list[CampaignPoint]
    counts: list[WindowCounts]
    cadence: float
    seed: int | list[int]


def simulate_campaign(cfg: ExperimentConfig, n_points: int, cadence: float, drift: float = 0.0,
                      seed: int = 0) -> Campaign:
    """Repeated runs at a fixed cadence, sampled at the window-count level."""
    validate_config(cfg)
    root = np.random.SeedSequence(seed)
    drift_seed, count_seed = root.spawn(2)
    points = campaign_points(cfg, n_points, cadence, drift, np.random.default_rng(drift_seed))
    rng = np.random.default_rng(count_seed)
    counts = [simulate_window_counts(p.config, rng) for p in points]
    return Campaign(points, counts, cadence, seed)


def _atomic_write(path: str, data: bytes | str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def write_campaign(cfg: ExperimentConfig, n_points: int, cadence: float, out_dir: str,
                   drift: float = 0.0, seed: int = 0, mode: str = "tags") -> dict:
    """Write a campaign directory and return its manifest.

    ``mode="tags"`` writes a signal and a vacuum QTT1 file per point;
    ``mode="counts"`` writes the window totals of every point to
    ``counts.csv`` instead, which keeps long campaigns (thousands of
    20 s runs) small on disk.
    """
    validate_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(seed)
    drift_seed, run_seed = root.spawn(2)
    points = campaign_points(cfg, n_points, cadence, drift, np.random.default_rng(drift_seed))
    manifest = {
        "format": "qmtwin-campaign/1",
        "mode": mode,
        "seed": seed,
        "cadence_s": cadence,
        "drift": drift,
        "config": config_to_dict(cfg),
        "points": [],
    }
    if mode == "tags":
        seeds = run_seed.spawn(2 * n_points)
        for p in points:
            entry = p.manifest_entry()
            entry["tags"] = f"point_{p.index:05d}.qtt"
            entry["vacuum"] = f"point_{p.index:05d}_vacuum.qtt"
            _atomic_write(os.path.join(out_dir, entry["tags"]), simulate_run(p.config, seeds[2 * p.index]))
            vac = p.config.replace(mu_in_target=0.0)
            _atomic_write(os.path.join(out_dir, entry["vacuum"]), simulate_run(vac, seeds[2 * p.index + 1]))
            manifest["points"].append(entry)
    elif mode == "counts":
        rng = np.random.default_rng(run_seed)
        lines = ["index,offset_s,n_mon,n_sig,n_noi,f_rep_hz,t_int_s"]
        for p in points:
            c = simulate_window_counts(p.config, rng)
            lines.append(f"{p.index},{p.offset_s!r},{c.N_mon},{c.N_sig},{c.N_noi},{c.f_rep!r},{c.t_int!r}")
            manifest["points"].append(p.manifest_entry())
        manifest["counts_file"] = "counts.csv"
        _atomic_write(os.path.join(out_dir, "counts.csv"), "\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown campaign mode {mode!r}")
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2))
    return manifest


def white_noise_scale(cfg: ExperimentConfig) -> float:
    """Approximate per-run relative sd of the efficiency estimate (Poisson only)."""
    n = cfg.n_shots
    n_mon, n_sig = expected_window_means(cfg)
    _, n_noi = expected_window_means(cfg.replace(mu_in_target=0.0))
    excess = n * (n_sig - n_noi)
    return math.sqrt((n * n_sig + n * n_noi) / excess**2 + 1.0 / (n * n_mon))
