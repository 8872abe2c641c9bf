"""Classical fidelity bound for weak coherent inputs with finite success probability.

A measure-and-prepare device that only has to answer with probability
``eta_accept`` can keep the shots that happened to contain most photons.
An N-photon Fock input is copied with fidelity at most (N+1)/(N+2)
(1/2 for vacuum), so the best such device accepts Poisson strata greedily
from the top until the accepted mass equals ``eta_accept``, splitting the
boundary stratum.  The bound is the acceptance-weighted mean fidelity.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.stats import poisson

TAIL_TOLERANCE = 1e-12
MIN_CUTOFF = 10


class Stratum(NamedTuple):
    n: int
    probability: float
    fidelity: float
    accepted: float  # fraction of the stratum kept, in [0, 1]


def fock_fidelity(n: np.ndarray | int) -> np.ndarray | float:
    return (np.asarray(n) + 1.0) / (np.asarray(n) + 2.0)


def poisson_cutoff(mu: float, tail: float = TAIL_TOLERANCE) -> int:
    """Smallest N >= 10 with P(X > N) < ``tail`` for X ~ Poisson(mu)."""
    n = max(MIN_CUTOFF, int(mu + 10 * np.sqrt(mu) + 10))
    while poisson.sf(n, mu) >= tail:
        n *= 2
    lo = MIN_CUTOFF
    while lo < n:
        mid = (lo + n) // 2
        if poisson.sf(mid, mu) < tail:
            n = mid
        else:
            lo = mid + 1
    return n


def _check(mu: float, eta_accept: float, n_max: int | None) -> int:
    if not mu > 0:
        raise ValueError(f"mean photon number must be > 0, got {mu}")
    if not 0 < eta_accept <= 1:
        raise ValueError(f"acceptance probability must be in (0, 1], got {eta_accept}")
    if n_max is None:
        return poisson_cutoff(mu)
    if n_max < MIN_CUTOFF:
        raise ValueError(f"n_max must be >= {MIN_CUTOFF}")
    if poisson.sf(n_max, mu) >= TAIL_TOLERANCE:
        raise ValueError(
            f"Poisson tail above n_max={n_max} is {poisson.sf(n_max, mu):.3g} >= {TAIL_TOLERANCE:g}; "
            f"use n_max >= {poisson_cutoff(mu)}"
        )
    return n_max


def acceptance(mu: float, eta_accept: float, n_max: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Poisson weights ``p[N]`` and accepted masses ``x[N]`` for N = 0..n_max."""
    n_max = _check(mu, eta_accept, n_max)
    n = np.arange(n_max + 1)
    p = poisson.pmf(n, mu)
    above = poisson.sf(n, mu)  # P(X > N), accurate in the far tail
    above[-1] = 0.0  # strata beyond the cutoff are not counted
    x = np.zeros_like(p)
    over = np.nonzero(above + p > eta_accept)[0]
    if len(over) == 0:
        return p, p.copy()
    k = int(over[-1])  # boundary stratum: P(X > k) <= eta < P(X >= k)
    x[k + 1:] = p[k + 1:]
    x[k] = min(p[k], max(0.0, eta_accept - above[k]))
    return p, x


def classical_threshold(mu: float, eta_accept: float, n_max: int | None = None) -> float:
    """Best average fidelity of a classical device with success probability ``eta_accept``."""
    _, x = acceptance(mu, eta_accept, n_max)
    n = np.arange(len(x))
    return float(np.dot(x, fock_fidelity(n)) / x.sum())


def threshold_strata(mu: float, eta_accept: float, n_max: int | None = None) -> list[Stratum]:
    p, x = acceptance(mu, eta_accept, n_max)
    return [
        Stratum(int(k), float(p[k]), float(fock_fidelity(k)), float(x[k] / p[k]) if p[k] > 0 else 0.0)
        for k in range(len(p))
    ]
