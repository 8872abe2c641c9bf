"""Exponential lifetime fits of storage-time scans.

The model is ``y = H * exp(-x / tau)``: ``tau`` is the 1/e decay time, in
the units of ``x``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

MAX_ITERATIONS = 100
REL_TOLERANCE = 1e-12
STEP_TOLERANCE = 1e-11
POLISH_LIMIT = 1e-8


class FitError(RuntimeError):
    pass


class ScanPoint(NamedTuple):
    x: float
    y: float
    sigma_y: float | None = None


@dataclass
class FitResult:
    H: float
    tau: float
    covariance: np.ndarray
    residual_norm: float
    chi2: float
    iterations: int
    weighted: bool

    @property
    def H_sd(self) -> float:
        return math.sqrt(self.covariance[0, 0])

    @property
    def tau_sd(self) -> float:
        return math.sqrt(self.covariance[1, 1])

    def to_dict(self) -> dict:
        return {
            "model": "y = H * exp(-x / tau)",
            "H": self.H,
            "H_sd": self.H_sd,
            "tau": self.tau,
            "tau_sd": self.tau_sd,
            "covariance": self.covariance.tolist(),
            "residual_norm": self.residual_norm,
            "chi2": self.chi2,
            "iterations": self.iterations,
            "weighted": self.weighted,
        }


def exp_decay(x: np.ndarray, H: float, tau: float) -> np.ndarray:
    return H * np.exp(-np.asarray(x, float) / tau)


def _arrays(points: Sequence[ScanPoint], weighted: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.array([p.x for p in points], float)
    y = np.array([p.y for p in points], float)
    sig = [p.sigma_y for p in points]
    if weighted and all(s is not None for s in sig):
        s = np.array(sig, float)
        if np.any(s <= 0):
            raise FitError("sigma_y must be > 0")
        w = 1.0 / s
    else:
        w = np.ones_like(x)
    return x, y, w


def residuals(params: Sequence[float], x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted residuals ``w * (model - y)``."""
    H, tau = params
    return w * (exp_decay(x, H, tau) - y)


def jacobian(params: Sequence[float], x: np.ndarray, w: np.ndarray) -> np.ndarray:
    H, tau = params
    e = np.exp(-x / tau)
    return np.column_stack([w * e, w * H * e * x / tau**2])


def objective(params: Sequence[float], x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    r = residuals(params, x, y, w)
    return float(r @ r)


def objective_gradient(params: Sequence[float], x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    return 2.0 * jacobian(params, x, w).T @ residuals(params, x, y, w)


def log_linear_guess(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Weighted straight-line fit of ln y; var(ln y) ~ (sigma / y)^2."""
    if np.any(y <= 0):
        raise FitError("log-linear initial guess needs all y > 0")
    lw = (w * y) ** 2
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A * np.sqrt(lw)[:, None], np.log(y) * np.sqrt(lw), rcond=None)
    intercept, slope = coef
    if slope >= 0:
        raise FitError("non-decaying data: log-linear slope is not negative")
    return math.exp(intercept), -1.0 / slope


def _polish(params: np.ndarray, x: np.ndarray, y: np.ndarray, w: np.ndarray,
            cost: float) -> tuple[np.ndarray, float]:
    """Drive the gradient to zero once the cost can no longer resolve progress.

    Near the optimum the objective changes by less than its rounding error,
    so step acceptance by cost stalls with the gradient still ~1e-8.
    A few tiny undamped Gauss-Newton steps remove that remainder.
    """
    for _ in range(8):
        J = jacobian(params, x, w)
        step = -np.linalg.lstsq(J, residuals(params, x, y, w), rcond=None)[0]
        if not np.all(np.abs(step) <= POLISH_LIMIT * np.abs(params)):
            break
        params = params + step
        if np.all(np.abs(step) <= 1e-15 * np.abs(params)):
            break
    return params, objective(params, x, y, w)


def fit_exponential(points: Sequence[ScanPoint] | Iterable[ScanPoint], weighted: bool = True,
                    absolute_sigma: bool = True) -> FitResult:
    """Least-squares fit of ``H * exp(-x / tau)``.

    Gauss-Newton from a log-linear start; Levenberg damping only engages
    after a rejected step.  With ``sigma_y`` on every point and
    ``weighted=True`` the residuals are weighted by ``1 / sigma_y`` and the
    covariance is ``(J^T J)^-1`` (``absolute_sigma``) or scaled by the
    reduced chi-square; unweighted fits always use the scaled form.
    """
    points = list(points)
    if len(points) < 3:
        raise FitError("at least 3 points are required")
    x, y, w = _arrays(points, weighted)
    has_sigma = weighted and all(p.sigma_y is not None for p in points)
    if np.ptp(x) == 0:
        raise FitError("all points share the same x")
    if np.any(x < 0):
        raise FitError("x must be >= 0")

    params = np.array(log_linear_guess(x, y, w))
    cost = objective(params, x, y, w)
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, MAX_ITERATIONS + 1):
        if cost == 0.0:
            converged = True
            break
        J = jacobian(params, x, w)
        r = residuals(params, x, y, w)
        JTJ = J.T @ J
        g = J.T @ r
        while True:
            A = JTJ + lam * np.diag(np.diag(JTJ))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(A, g, rcond=None)[0]
            trial = params + step
            new_cost = objective(trial, x, y, w) if trial[1] > 0 else math.inf
            if new_cost <= cost:
                break
            lam = 1e-3 if lam == 0.0 else lam * 10.0
            if lam > 1e16:
                break
        if not new_cost <= cost:
            # no descent direction left: at a minimum to machine precision
            converged = True
            break
        decrease = (cost - new_cost) / cost
        rel_step = float(np.max(np.abs(step) / np.abs(params)))
        params, cost = trial, new_cost
        lam = lam / 10.0 if lam > 1e-6 else 0.0
        # a tiny objective decrease alone only bounds the gradient to ~sqrt(tol),
        # so the step must be negligible as well
        if rel_step <= 1e-15 or (decrease < REL_TOLERANCE and rel_step < STEP_TOLERANCE):
            converged = True
            break
    if not converged:
        raise FitError(
            f"no convergence after {MAX_ITERATIONS} iterations, residual norm {math.sqrt(cost):.6g}")
    params, cost = _polish(params, x, y, w, cost)
    H, tau = params
    if tau <= 0:
        raise FitError("non-decaying data: tau <= 0 at optimum")

    J = jacobian(params, x, w)
    cov = np.linalg.inv(J.T @ J)
    dof = len(x) - 2
    if not (has_sigma and absolute_sigma):
        cov = cov * (cost / dof if dof > 0 else math.inf)
    return FitResult(float(H), float(tau), cov, math.sqrt(cost), cost, it, has_sigma)


def read_points_csv(fh: IO[str]) -> list[ScanPoint]:
    """Rows of ``x, y[, sigma_y]``; a header row is skipped when present."""
    points = []
    for row in csv.reader(fh):
        if not row or row[0].strip().startswith("#"):
            continue
        try:
            vals = [float(v) for v in row if v.strip() != ""]
        except ValueError:
            if not points:
                continue  # header
            raise FitError(f"bad row {row!r}") from None
        if len(vals) < 2:
            raise FitError(f"row needs at least x and y: {row!r}")
        points.append(ScanPoint(vals[0], vals[1], vals[2] if len(vals) > 2 else None))
    return points
