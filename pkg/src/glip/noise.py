"""
Exponential-family noise models.

Each coordinate of the data has density

    p(y; eta, tau) = exp(-(y b(eta) - c(eta)) / tau + d(y, tau))

with mean ``eta`` and dispersion ``tau``. Three canonical families are
provided (Gaussian, rescaled Poisson, Gamma) together with a shifted
exponential model whose support depends on ``eta``; the latter is not in
canonical form and only offers densities, moments and sampling.

Everything the posterior code needs is expressed through ``nll`` and its
derivatives: the per-coordinate negative log-likelihood multiplied by
``tau`` with the ``d`` term dropped, i.e. ``y b(eta) - c(eta)`` for the
canonical families.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from glip.errors import DomainError

#: largest Poisson rate ``eta / tau`` accepted by :func:`sample`
MAX_POISSON_RATE = 1e7


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SCALED_POISSON = "scaled_poisson"
    GAMMA = "gamma"
    SHIFTED_EXPONENTIAL = "shifted_exponential"


@dataclass(frozen=True, eq=False)
class NoiseFamily:
    """A product of independent one-parameter noise models.

    ``shape`` holds the per-coordinate parameter: the variance factor
    sigma_i^2 for Gaussian noise, the Gamma shape scale ``a`` (the actual
    shape is ``a / tau``), the exponential rate lambda_i, and ones for the
    rescaled Poisson family, which has no free parameter.
    """

    kind: NoiseKind
    shape: np.ndarray

    def __post_init__(self):
        shape = np.atleast_1d(np.asarray(self.shape, dtype=float))
        if shape.ndim != 1 or shape.size == 0:
            raise ValueError("shape must be a non-empty vector")
        if not np.all(np.isfinite(shape)) or np.any(shape <= 0):
            raise ValueError("noise shape parameters must be finite and strictly positive")
        shape.setflags(write=False)
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        object.__setattr__(self, "shape", shape)

    @classmethod
    def gaussian(cls, sigma2, n: int | None = None) -> NoiseFamily:
        return cls(NoiseKind.GAUSSIAN, _broadcast(sigma2, n))

    @classmethod
    def scaled_poisson(cls, n: int) -> NoiseFamily:
        return cls(NoiseKind.SCALED_POISSON, np.ones(n))

    @classmethod
    def gamma(cls, a, n: int | None = None) -> NoiseFamily:
        return cls(NoiseKind.GAMMA, _broadcast(a, n))

    @classmethod
    def shifted_exponential(cls, rate, n: int | None = None) -> NoiseFamily:
        return cls(NoiseKind.SHIFTED_EXPONENTIAL, _broadcast(rate, n))

    @property
    def n(self) -> int:
        return self.shape.size

    @property
    def canonical(self) -> bool:
        return self.kind is not NoiseKind.SHIFTED_EXPONENTIAL

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "shape": self.shape.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> NoiseFamily:
        return cls(NoiseKind(data["kind"]), np.asarray(data["shape"], dtype=float))

    # -- canonical functions b, c and derivatives --------------------------

    def check_eta(self, eta) -> np.ndarray:
        """Return ``eta`` as an array, raising if it is inadmissible."""
        eta = np.asarray(eta, dtype=float)
        if eta.shape[-1:] != (self.n,):
            raise ValueError(f"eta has shape {eta.shape}, expected trailing dimension {self.n}")
        if not np.all(np.isfinite(eta)):
            raise DomainError("eta must be finite")
        if self.kind in (NoiseKind.SCALED_POISSON, NoiseKind.GAMMA):
            bad = np.flatnonzero(np.ravel(eta) <= 0)
            if bad.size:
                raise DomainError(
                    f"{self.kind.value} noise needs eta > 0; coordinate {bad[0] % self.n} "
                    f"has eta = {np.ravel(eta)[bad[0]]!r}"
                )
        return eta

    def _require_canonical(self):
        if not self.canonical:
            raise DomainError("the shifted exponential model has no canonical b, c functions")

    def b(self, eta, order: int = 0) -> np.ndarray:
        """``b`` or its derivative of the given order (0 to 3)."""
        self._require_canonical()
        eta = self.check_eta(eta)
        s = self.shape
        if self.kind is NoiseKind.GAUSSIAN:
            return [-eta / s, -1.0 / s + 0 * eta, 0 * eta, 0 * eta][order]
        if self.kind is NoiseKind.SCALED_POISSON:
            return [-np.log(eta), -1.0 / eta, eta**-2.0, -2.0 * eta**-3.0][order]
        return [s / eta, -s * eta**-2.0, 2 * s * eta**-3.0, -6 * s * eta**-4.0][order]

    def c(self, eta, order: int = 0) -> np.ndarray:
        """``c`` or its derivative of the given order (0 to 3)."""
        self._require_canonical()
        eta = self.check_eta(eta)
        s = self.shape
        if self.kind is NoiseKind.GAUSSIAN:
            return [-0.5 * eta**2 / s, -eta / s, -1.0 / s + 0 * eta, 0 * eta][order]
        if self.kind is NoiseKind.SCALED_POISSON:
            return [-eta, -1.0 + 0 * eta, 0 * eta, 0 * eta][order]
        return [-s * np.log(eta), -s / eta, s * eta**-2.0, -2 * s * eta**-3.0][order]

    def d(self, y, tau: float) -> np.ndarray:
        """Per-coordinate normalizer ``d(y, tau)``; assumes ``y`` is in the support."""
        y = np.asarray(y, dtype=float)
        s = self.shape
        if self.kind is NoiseKind.GAUSSIAN:
            return -0.5 * y**2 / (s * tau) - 0.5 * np.log(2 * np.pi * s * tau)
        if self.kind is NoiseKind.SCALED_POISSON:
            counts = np.rint(y / tau)
            return -counts * np.log(tau) - gammaln(counts + 1)
        if self.kind is NoiseKind.GAMMA:
            k = s / tau
            return (k - 1) * np.log(y) + k * np.log(k) - gammaln(k)
        raise DomainError("the shifted exponential model has no canonical normalizer")

    # -- negative log-likelihood in tau units -------------------------------

    def nll(self, y, eta, strict: bool = True) -> np.ndarray:
        """Per-coordinate ``tau * (-log p)`` without the ``d`` term.

        With ``strict=False`` inadmissible ``eta`` gives ``+inf`` instead of
        raising, which is what samplers want.
        """
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        s = self.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind is NoiseKind.GAUSSIAN:
                return 0.5 * (eta**2 - 2 * y * eta) / s
            if self.kind is NoiseKind.SCALED_POISSON:
                bad = (eta < 0) | ((eta == 0) & (y > 0))
                out = eta - xlogy(y, np.where(bad, 1.0, eta))
            elif self.kind is NoiseKind.GAMMA:
                bad = eta <= 0
                safe = np.where(bad, 1.0, eta)
                out = s * (y / safe + np.log(safe))
            else:
                bad = eta > y
                out = s * (y - eta)
        if np.any(bad):
            if strict:
                idx = np.flatnonzero(np.ravel(bad))[0] % self.n
                raise DomainError(f"eta is inadmissible for {self.kind.value} noise at coordinate {idx}")
            out = np.where(bad, np.inf, out)
        return out

    def nll_grad(self, y, eta) -> np.ndarray:
        """Derivative of :meth:`nll` in ``eta`` (elementwise)."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        s = self.shape
        if self.kind is NoiseKind.GAUSSIAN:
            return (eta - y) / s
        if self.kind is NoiseKind.SCALED_POISSON:
            with np.errstate(divide="ignore", invalid="ignore"):
                return 1.0 - np.where(y == 0, 0.0, y / eta)
        if self.kind is NoiseKind.GAMMA:
            return s * (eta - y) / eta**2
        return -s + 0 * eta

    def nll_hess(self, y, eta) -> np.ndarray:
        """Second derivative of :meth:`nll` in ``eta`` (the Hessian is diagonal)."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        s = self.shape
        if self.kind is NoiseKind.GAUSSIAN:
            return 1.0 / s + 0 * eta
        if self.kind is NoiseKind.SCALED_POISSON:
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(y == 0, 0.0, y / eta**2)
        if self.kind is NoiseKind.GAMMA:
            return s * (2 * y - eta) / eta**3
        return 0 * eta


def _broadcast(value, n):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if n is not None:
        if arr.size == 1:
            arr = np.full(n, arr[0])
        elif arr.size != n:
            raise ValueError(f"expected {n} shape parameters, got {arr.size}")
    return arr


def _in_support(family: NoiseFamily, y: np.ndarray, eta: np.ndarray, tau: float) -> np.ndarray:
    if family.kind is NoiseKind.GAUSSIAN:
        return np.isfinite(y)
    if family.kind is NoiseKind.SCALED_POISSON:
        counts = y / tau
        return (counts >= 0) & (np.abs(counts - np.rint(counts)) <= 1e-9 * np.maximum(1.0, counts))
    if family.kind is NoiseKind.GAMMA:
        return y > 0
    return y >= eta


def log_density(family: NoiseFamily, y, eta, tau: float) -> float:
    """Joint log density of ``y`` given mean parameter ``eta``.

    Data outside the support give ``-inf`` and a ``RuntimeWarning``.
    """
    if tau <= 0:
        raise DomainError("tau must be positive")
    y = np.asarray(y, dtype=float)
    eta = family.check_eta(eta)
    inside = _in_support(family, y, eta, tau)
    if not np.all(inside):
        warnings.warn(
            f"observation outside the {family.kind.value} support at coordinate "
            f"{int(np.flatnonzero(~inside)[0])}",
            RuntimeWarning,
            stacklevel=2,
        )
        return -np.inf
    if family.kind is NoiseKind.SHIFTED_EXPONENTIAL:
        rate = family.shape / tau
        return float(np.sum(np.log(rate) - rate * (y - eta)))
    expo = -(y * family.b(eta) - family.c(eta)) / tau
    return float(np.sum(expo + family.d(y, tau)))


def mean_variance(family: NoiseFamily, eta, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise mean and variance of the data."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    eta = family.check_eta(eta)
    if family.kind is NoiseKind.SHIFTED_EXPONENTIAL:
        scale = tau / family.shape
        return eta + scale, scale**2
    return eta.copy(), -tau / family.b(eta, 1)


def sample(family: NoiseFamily, eta, tau: float, stream: np.random.Generator) -> np.ndarray:
    """One draw of the data vector.

    The rescaled Poisson family allows ``eta_i = 0`` (a point mass at zero).
    Trailing batch dimensions of ``eta`` are supported.
    """
    if tau <= 0:
        raise DomainError("tau must be positive")
    eta = np.asarray(eta, dtype=float)
    s = family.shape
    if family.kind is NoiseKind.GAUSSIAN:
        family.check_eta(eta)
        return eta + np.sqrt(tau * s) * stream.standard_normal(eta.shape)
    if family.kind is NoiseKind.SCALED_POISSON:
        if np.any(eta < 0) or not np.all(np.isfinite(eta)):
            raise DomainError("rescaled Poisson sampling needs finite eta >= 0")
        rate = eta / tau
        if np.any(rate > MAX_POISSON_RATE):
            raise DomainError(
                f"Poisson rate {float(np.max(rate)):.3g} exceeds the exact sampler limit {MAX_POISSON_RATE:.0e}"
            )
        return tau * stream.poisson(rate).astype(float)
    if family.kind is NoiseKind.GAMMA:
        family.check_eta(eta)
        k = s / tau
        return stream.gamma(k, eta / k)
    if not np.all(np.isfinite(eta)):
        raise DomainError("eta must be finite")
    return eta + stream.exponential(tau / s, size=eta.shape)


@dataclass(frozen=True)
class NoiseConstants:
    """Diagonals of the smoothness and data-convergence matrices.

    ``m_f1``, ``m_f2`` and ``c_f`` bound the change of the likelihood
    derivatives in the data and in the parameter; ``v`` is the likelihood
    curvature at the exact data, which for canonical families equals
    ``m_f1``.
    """

    m_f1: np.ndarray
    m_f2: np.ndarray
    c_f: np.ndarray
    v: np.ndarray

    def matrices(self) -> dict[str, np.ndarray]:
        return {k: np.diag(getattr(self, k)) for k in ("m_f1", "m_f2", "c_f", "v")}


def noise_constants(
    family: NoiseFamily,
    y_exact,
    delta: float = 0.0,
    rho: float = 0.0,
    operator_norm: float = 0.0,
) -> NoiseConstants:
    """Family-specific constants for the interior contraction bound.

    ``rho`` is the Ky Fan distance between data and exact data and
    ``delta * operator_norm`` the largest change of ``A x`` over the
    localization ball; for the Poisson and Gamma families every exact
    datum must stay above that change.
    """
    if not family.canonical:
        raise DomainError("noise constants are only tabulated for canonical families")
    if delta < 0 or rho < 0 or operator_norm < 0:
        raise ValueError("delta, rho and operator_norm must be non-negative")
    y = family.check_eta(np.asarray(y_exact, dtype=float))
    s = family.shape
    if family.kind is NoiseKind.GAUSSIAN:
        inv = 1.0 / s
        zero = np.zeros_like(inv)
        return NoiseConstants(inv, zero, zero.copy(), inv.copy())
    margin = y - delta * operator_norm
    bad = np.flatnonzero(margin <= 0)
    if bad.size:
        i = int(bad[0])
        raise DomainError(
            f"coordinate {i}: y_exact = {y[i]!r} does not exceed delta * ||A|| = {delta * operator_norm!r}"
        )
    if family.kind is NoiseKind.SCALED_POISSON:
        m1 = 1.0 / y
        return NoiseConstants(m1, y**-2.0, 2 * (y + rho) * margin**-3.0, m1.copy())
    m1 = s * y**-2.0
    return NoiseConstants(m1, 2 * s * y**-3.0, 2 * s * (4 * y + rho) * margin**-4.0, m1.copy())
