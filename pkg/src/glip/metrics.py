"""
Ky Fan and Prokhorov distances.

The Ky Fan distance between random variables ``X`` and ``Y`` is
``inf{eps > 0 : P(d(X, Y) > eps) < eps}``. To a point mass, the Prokhorov
distance of a law equals the Ky Fan distance of a variable with that law,
so both are estimated from samples of distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from glip.errors import ConvergenceError, DomainError
from glip.rng import as_generator

INV_E = math.exp(-1.0)
BOOTSTRAP_RESAMPLES = 200
MIN_PROKHOROV_DRAWS = 100


@dataclass(frozen=True)
class KyFanEstimate:
    epsilon: float
    sample_count: int
    standard_error_hint: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "sample_count": self.sample_count,
            "standard_error_hint": self.standard_error_hint,
        }


def kyfan_rows(distances: np.ndarray) -> np.ndarray:
    """Empirical Ky Fan distance of each row of a 2-d array.

    With the row sorted in decreasing order as ``e_1 >= ... >= e_m`` and
    ``e_0 = inf``, ``e_{m+1} = 0``, the tail frequency ``#{d > eps} / m``
    equals ``k / m`` on ``[e_{k+1}, e_k)``. The infimum of the admissible
    set on that interval is ``max(e_{k+1}, k/m)`` whenever this is below
    ``e_k``; the answer is the smallest such candidate.
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[1] == 0:
        raise ValueError("need a non-empty 2-d array of distances")
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("distances must be non-negative")
    rows, m = d.shape
    desc = -np.sort(-d, axis=1)
    upper = np.concatenate([np.full((rows, 1), np.inf), desc], axis=1)
    lower = np.concatenate([desc, np.zeros((rows, 1))], axis=1)
    k = np.arange(m + 1) / m
    cand = np.maximum(lower, k)
    cand = np.where(cand < upper, cand, np.inf)
    return cand.min(axis=1)


def kyfan_empirical(distances, n_boot: int = BOOTSTRAP_RESAMPLES, stream=None) -> KyFanEstimate:
    """Empirical Ky Fan distance of a multiset of distances.

    ``standard_error_hint`` is the bootstrap standard deviation over
    ``n_boot`` resamples (0 when ``n_boot`` is 0); it is advisory only.
    """
    d = np.ravel(np.asarray(distances, dtype=float))
    if d.size == 0:
        raise ValueError("kyfan_empirical needs at least one distance")
    eps = float(kyfan_rows(d[None])[0])
    se = 0.0
    if n_boot > 0 and d.size > 1:
        rng = as_generator(stream)
        idx = rng.integers(0, d.size, size=(n_boot, d.size))
        se = float(np.std(kyfan_rows(d[idx]), ddof=1))
    return KyFanEstimate(eps, int(d.size), se)


def prokhorov_to_point(draws, x_ref, scale: float = 1.0, n_boot: int = BOOTSTRAP_RESAMPLES, stream=None) -> KyFanEstimate:
    """Prokhorov distance between the empirical law of ``draws`` and a point mass.

    Distances are Euclidean divided by ``scale`` (``sqrt(p)`` for the
    normalized grid metric).
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[0] < MIN_PROKHOROV_DRAWS:
        raise ValueError(f"need at least {MIN_PROKHOROV_DRAWS} draws, got {draws.shape[0]}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    dist = np.linalg.norm(draws - np.asarray(x_ref, dtype=float), axis=1) / scale
    return kyfan_empirical(dist, n_boot, stream)


def kyfan_fixed_point(a: float, tol: float = 1e-12) -> float:
    """Root of ``exp(-z / a) = z`` for ``0 < a <= 1/e``, by bisection.

    The root lies in ``(0, -a log a]``; this is the exact Ky Fan distance
    between ``mu`` and ``mu + Exp(rate 1/a)``.
    """
    if not 0 < a <= INV_E * (1 + 1e-15):
        raise DomainError(f"kyfan_fixed_point needs 0 < A <= 1/e, got {a!r}")
    lo, hi = 0.0, -a * math.log(a)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        r = math.exp(-mid / a) - mid
        if r > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.spacing(hi):
            break
    for z in (hi, lo):
        if abs(math.exp(-z / a) - z) < tol:
            return z
    raise ConvergenceError("bisection for the Ky Fan fixed point did not reach the tolerance", hi)


def _neg_t_log_t(t: float, name: str) -> float:
    if not 0 < t < INV_E:
        raise DomainError(f"{name} = {t!r} must lie in (0, 1/e)")
    return -t * math.log(t)


def kyfan_bound_gaussian(trace_sigma: float) -> float:
    """Ky Fan bound ``sqrt(-4 tr log(4 tr))`` for a centred Gaussian; needs ``tr < 1/(4e)``."""
    if not 0 < trace_sigma < INV_E / 4:
        raise DomainError(f"trace(Sigma) = {trace_sigma!r} must lie in (0, 1/(4e))")
    return math.sqrt(_neg_t_log_t(4 * trace_sigma, "4 trace(Sigma)"))


def kyfan_bound_poisson(mu, tau: float) -> float:
    """Ky Fan bound for ``tau * Poisson(mu / tau)`` around ``mu`` with ``M = 4 sum(mu)``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if np.any(mu <= 0) or tau <= 0:
        raise DomainError("mu and tau must be positive")
    return math.sqrt(_neg_t_log_t(tau * 4 * float(mu.sum()), "tau M"))


def kyfan_bound_exponential(rate: float, tau: float) -> float:
    """Ky Fan bound ``-(tau/rate) log(tau/rate)`` for ``mu + Exp(rate / tau)``."""
    if rate <= 0 or tau <= 0:
        raise DomainError("rate and tau must be positive")
    return _neg_t_log_t(tau / rate, "tau / lambda")


def kyfan_bound_cumulant(c, w, tau: float) -> float:
    """Ky Fan bound from a cumulant condition with constants ``C_t >= 1`` and weights ``w_t``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if np.any(c < 1):
        raise DomainError("cumulant constants C_t must be >= 1")
    if np.any(w <= 0) or tau <= 0:
        raise DomainError("weights and tau must be positive")
    return math.sqrt(_neg_t_log_t(tau * 4 * float(np.sum(c * w)), "tau M"))


def kyfan_bound_moment(n: int, tau: float, m_k: float, l_k: float, k: float, exponential: bool = False) -> float:
    """Ky Fan bound ``(n tau^(m_K/2) L_K)^(1/(K+1))`` from a moment condition.

    With ``exponential=True`` the argument ``l_k`` is taken as an
    exponential moment ``E exp(alpha |Y - mu|)`` and returned clipped at
    1, the trivial bound on any Ky Fan distance.
    """
    if exponential:
        if l_k <= 0:
            raise DomainError("the exponential moment must be positive")
        return min(1.0, float(l_k))
    if n < 1 or tau <= 0 or m_k <= 0 or l_k <= 0 or k <= 0:
        raise DomainError("moment bound arguments must be positive")
    return float((n * tau ** (m_k / 2) * l_k) ** (1.0 / (k + 1)))


def lifting_combine(phi1_at_rho: float, rho_data: float, p_omega2: float) -> float:
    """Ky Fan bound on ``X1, X2`` from one on ``Y1, Y2`` and a modulus on a good event."""
    return max(rho_data + p_omega2, phi1_at_rho)
