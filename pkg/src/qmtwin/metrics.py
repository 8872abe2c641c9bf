"""Characterization formulas: input photon number, efficiency, SNR, noise figure, fidelity.

Every function takes raw window totals plus the calibration and is pure.
Statistical uncertainties come from Poisson counting (sd = sqrt(N)), the
systematic ones from the calibration sds; both are first-order propagated
and kept apart.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .model import Calibration
from .threshold import classical_threshold


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class WindowCounts:
    """Detection-window totals of one run and its vacuum reference.

    ``N_noi`` is the signal-window total of a run with zero input and
    otherwise identical settings.
    """

    N_mon: int
    N_sig: int
    N_noi: int
    f_rep: float
    t_int: float

    def __post_init__(self):
        for name in ("N_mon", "N_sig", "N_noi"):
            if getattr(self, name) < 0:
                raise MetricsError(f"{name} must be >= 0")

    @property
    def shots(self) -> float:
        return self.f_rep * self.t_int

    @property
    def excess(self) -> int:
        return self.N_sig - self.N_noi


@dataclass(frozen=True)
class Estimate:
    value: float
    stat: float = 0.0
    sys: float = 0.0

    @property
    def total(self) -> float:
        return math.hypot(self.stat, self.sys)

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class MetricsResult:
    mu_in: Estimate
    eta_e2e: Estimate
    eta_mem: Estimate
    snr: Estimate
    mu_1: Estimate
    fidelity: Estimate
    threshold_e2e: float = math.nan
    threshold_mem: float = math.nan
    flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        out = {}
        for name in ("mu_in", "eta_e2e", "eta_mem", "snr", "mu_1", "fidelity"):
            est: Estimate = getattr(self, name)
            out[name] = {**asdict(est), "total": est.total}
        out["classical_threshold_e2e"] = self.threshold_e2e
        out["classical_threshold_mem"] = self.threshold_mem
        out["flags"] = list(self.flags)
        return out


def _shots(c: WindowCounts) -> float:
    shots = c.f_rep * c.t_int
    if not shots > 0:
        raise MetricsError("f_rep * t_int must be positive")
    return shots


def mean_input_photon_number(c: WindowCounts, cal: Calibration) -> float:
    """mu_in = N_mon * theta / (t_int * f_rep * eta_apd_mon)"""
    return c.N_mon * cal.theta / (_shots(c) * cal.eta_apd_mon)


def end_to_end_efficiency(c: WindowCounts, mu_in: float, cal: Calibration) -> float:
    """eta_e2e = (N_sig - N_noi) / (mu_in * eta_apd_sig * f_rep * t_int)

    Returned as-is when the excess is zero or negative; callers flag it.
    """
    if not mu_in > 0:
        raise MetricsError("efficiency undefined at vacuum input (mu_in = 0)")
    return c.excess / (mu_in * cal.eta_apd_sig * _shots(c))


def memory_efficiency(eta_e2e: float, cal: Calibration) -> float:
    return eta_e2e / cal.eta_setup


def snr(c: WindowCounts) -> float:
    """(N_sig - N_noi) / N_noi; ``inf`` when no noise was counted, NaN if nothing was."""
    if c.N_noi == 0:
        return math.inf if c.N_sig > 0 else math.nan
    return c.excess / c.N_noi


def mu1(c: WindowCounts, eta_e2e: float) -> float:
    """Noise figure mu_1 = N_noi / (eta_e2e * f_rep * t_int)."""
    if not eta_e2e > 0:
        raise MetricsError(f"mu_1 needs a positive efficiency, got {eta_e2e}")
    return c.N_noi / (eta_e2e * _shots(c))


def fidelity(mu_in: float, mu_1: float) -> float:
    """F = (mu_in + mu_1) / (mu_in + 2 mu_1)"""
    if mu_in < 0 or mu_1 < 0:
        raise MetricsError("photon numbers must be non-negative")
    if mu_in == 0 and mu_1 == 0:
        raise MetricsError("fidelity undefined for mu_in = mu_1 = 0")
    return (mu_in + mu_1) / (mu_in + 2 * mu_1)


def _rel(sd: float, value: float) -> float:
    return sd / value


def propagate_uncertainty(c: WindowCounts, cal: Calibration) -> dict[str, tuple[float, float]]:
    """(statistical sd, systematic sd) of every metric, first order.

    The three window totals are independent Poisson variables; theta and
    the detector efficiencies carry the calibration sds.  Metrics that are
    undefined for these counts get NaN.
    """
    nan = (math.nan, math.nan)
    S = _shots(c)
    r_theta = _rel(cal.theta_sd, cal.theta)
    r_mon = _rel(cal.eta_apd_mon_sd, cal.eta_apd_mon)
    r_sig = _rel(cal.eta_apd_sig_sd, cal.eta_apd_sig)
    r_setup = _rel(cal.eta_setup_sd, cal.eta_setup)

    mu = mean_input_photon_number(c, cal)
    out = {"mu_in": (math.sqrt(c.N_mon) * cal.theta / (S * cal.eta_apd_mon), mu * math.hypot(r_theta, r_mon))}

    if c.N_noi > 0:
        out["snr"] = (math.sqrt(c.N_sig / c.N_noi**2 + c.N_sig**2 / c.N_noi**3), 0.0)
    else:
        out["snr"] = nan

    if mu <= 0:
        out.update(eta_e2e=nan, eta_mem=nan, mu_1=nan, fidelity=nan)
        return out

    eta = end_to_end_efficiency(c, mu, cal)
    scale = 1.0 / (mu * cal.eta_apd_sig * S)
    eta_stat = math.sqrt((c.N_sig + c.N_noi) * scale**2 + eta**2 / c.N_mon)
    r_e2e = math.sqrt(r_theta**2 + r_mon**2 + r_sig**2)
    out["eta_e2e"] = (eta_stat, abs(eta) * r_e2e)
    out["eta_mem"] = (eta_stat / cal.eta_setup, abs(eta / cal.eta_setup) * math.hypot(r_e2e, r_setup))

    D = c.excess
    if eta <= 0:
        out.update(mu_1=nan, fidelity=nan)
        return out
    m1 = mu1(c, eta)
    d_noi = 1.0 / (eta * S) + m1 / D
    d_sig = -m1 / D
    d_mon = m1 / c.N_mon
    out["mu_1"] = (math.sqrt(c.N_noi * d_noi**2 + c.N_sig * d_sig**2 + c.N_mon * d_mon**2), m1 * r_e2e)

    # F depends on counts only through r = mu_1 / mu_in = N_noi * eta_apd_sig / D
    r = c.N_noi * cal.eta_apd_sig / D
    dF_dr = 1.0 / (1.0 + 2.0 * r) ** 2
    dr_noi = cal.eta_apd_sig * c.N_sig / D**2
    dr_sig = cal.eta_apd_sig * c.N_noi / D**2
    r_stat = math.sqrt(c.N_noi * dr_noi**2 + c.N_sig * dr_sig**2)
    out["fidelity"] = (dF_dr * r_stat, dF_dr * r * r_sig)
    return out


def compute_metrics(c: WindowCounts, cal: Calibration) -> MetricsResult:
    """All metrics of one run with uncertainties and the classical thresholds.

    Nothing is clamped: a non-positive excess ``N_sig - N_noi`` is reported
    with the flag ``"excess_nonpositive"`` and leaves mu_1 and F undefined.
    """
    flags = []
    unc = propagate_uncertainty(c, cal)
    mu = mean_input_photon_number(c, cal)
    s = snr(c)
    if math.isinf(s):
        flags.append("infinite_snr")
    nan = math.nan
    eta = eta_m = m1 = F = nan
    if mu <= 0:
        flags.append("vacuum_input")
        if c.excess == 0:
            eta = eta_m = 0.0
    else:
        eta = end_to_end_efficiency(c, mu, cal)
        eta_m = memory_efficiency(eta, cal)
        if eta > 0:
            m1 = mu1(c, eta)
            F = fidelity(mu, m1)
    if c.excess <= 0:
        flags.append("excess_nonpositive")

    thr_e2e = thr_mem = nan
    if mu > 0 and 0 < eta <= 1:
        thr_e2e = classical_threshold(mu, eta)
        if eta_m <= 1:
            thr_mem = classical_threshold(mu, eta_m)

    def est(name: str, value: float) -> Estimate:
        stat, sys = unc[name]
        return Estimate(value, stat, sys)

    return MetricsResult(
        mu_in=est("mu_in", mu),
        eta_e2e=est("eta_e2e", eta),
        eta_mem=est("eta_mem", eta_m),
        snr=est("snr", s),
        mu_1=est("mu_1", m1),
        fidelity=est("fidelity", F),
        threshold_e2e=thr_e2e,
        threshold_mem=thr_mem,
        flags=tuple(flags),
    )
