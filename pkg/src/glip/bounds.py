"""
Theoretical bounds and rates for posterior contraction.

Asymptotic bounds are evaluated with every generic constant set to 1; they
are shapes to compare slopes against, not calibrated numbers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from glip.errors import DomainError, PreconditionError
from glip.infer import Domain, GlipProblem, h_value_grad_hess, laplace_summary
from glip.noise import NoiseKind, noise_constants
from glip.prior import grad_hess, smoothness_matrix, solve_x_star
from glip.rng import as_generator

NOT_EVALUATED = "not-evaluated"
INV_E = math.exp(-1.0)


@dataclass
class BoundReport:
    """Terms of a posterior contraction bound.

    ``overall`` is the maximum of the populated terms; when ``valid`` is
    false it is ``nan`` and ``reason`` says why.
    """

    kind: str
    random_bias_coeff: float
    prior_bias: float
    variance_term: float
    data_term: float
    tail_term: float | str
    overall: float
    valid: bool = True
    reason: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Plain JSON-safe mapping; non-finite numbers become strings."""
        return _jsonable({
            "kind": self.kind,
            "random_bias_coeff": self.random_bias_coeff,
            "prior_bias": self.prior_bias,
            "variance_term": self.variance_term,
            "data_term": self.data_term,
            "tail_term": self.tail_term,
            "overall": self.overall,
            "valid": self.valid,
            "reason": self.reason,
            "diagnostics": self.diagnostics,
        })


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in np.asarray(v).tolist()] if isinstance(v, np.ndarray) else [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _norm(m) -> float:
    m = np.atleast_2d(m)
    return float(np.linalg.norm(m, 2)) if m.size else 0.0


# -- interior bound ----------------------------------------------------------------


@dataclass(frozen=True)
class _InteriorParts:
    c1: float
    c2: float
    lam: float
    d_norm: float
    trace: float
    lam_min: float
    summary: object


def _interior_parts(problem: GlipProblem, rho: float, delta: float, stream=None) -> _InteriorParts:
    if not problem.link.is_identity:
        raise PreconditionError("bound constants are tabulated for the identity link only")
    star = solve_x_star(problem)
    if not star.interior:
        raise PreconditionError("x_star is on the boundary of the domain; use boundary_bound")
    y_exact = problem.y_exact
    summary = laplace_summary(problem, y_exact, star, with_map=False)
    a = problem.operator.matrix
    op_norm = problem.operator.norm
    const = noise_constants(problem.noise, y_exact, delta, rho, op_norm)
    h_nu = summary.H_nu
    try:
        h_inv = np.linalg.inv(h_nu)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("H_nu is singular") from exc
    if np.linalg.eigvalsh(h_nu).min() <= 0:
        raise PreconditionError("H_nu is not positive definite")
    nu = problem.nu
    c_g = smoothness_matrix(problem.prior, star.x_star, delta, stream)
    d = (a.T * const.c_f) @ a * op_norm + nu * c_g
    lam = delta * _norm(h_inv @ d) + rho * _norm(h_inv @ ((a.T * const.m_f2) @ a))
    c1 = _norm(h_inv @ (a.T * const.m_f1))
    c2 = float(np.linalg.norm(h_inv @ grad_hess(problem.prior, star.x_star)[1]))
    trace = float(np.trace(h_inv))
    lam_min = float(np.linalg.eigvalsh(h_nu).min())
    return _InteriorParts(c1, c2, lam, _norm(d), trace, lam_min, summary)


def _variance(tau, trace):
    t = 4 * tau * trace
    if not 0 < t < INV_E:
        raise PreconditionError(f"4 tau trace(H_nu^-1) = {t!r} must lie in (0, 1/e)")
    return math.sqrt(-t * math.log(t))


def _delta_star(parts, tau, p, rho, nu, delta, c1b, c2b, delta0):
    bias = c1b * rho + c2b * nu
    radius = math.sqrt(parts.lam_min / tau) * math.sqrt(1 - parts.lam) * (delta - bias)
    mass = float(stats.chi2.cdf(radius**2, p)) if radius > 0 else 0.0
    with np.errstate(over="ignore", divide="ignore"):
        growth = math.exp(min(delta * parts.d_norm * bias**2 / tau, 700.0))
        ratio = ((1 + parts.lam) / (1 - parts.lam)) ** (p / 2)
        value = growth / mass * ratio - 1 + delta0 + parts.lam if mass > 0 else math.inf
    return radius, mass, value


def interior_bound(
    problem: GlipProblem,
    rho_data: float,
    delta: float,
    evaluate_tail: bool = False,
    tail_budget: int = 20000,
    stream=None,
    inflate: bool = False,
    y=None,
) -> BoundReport:
    """Ky Fan bound on the posterior around an interior ``x_star``.

    ``overall = max(2 rho, tail, c1b rho + c2b nu + variance)`` where
    ``c1b, c2b`` are the bias coefficients inflated by ``1 / (1 - lam)``.
    The correction factor ``Delta_star`` is reported in the diagnostics and
    multiplies the variance term only when ``inflate`` is set. The tail
    ratio is estimated at ``y`` (default: the exact data).
    """
    if rho_data < 0 or delta < 0:
        raise ValueError("rho_data and delta must be non-negative")
    tau, nu, p = problem.tau, problem.nu, problem.p
    parts = _interior_parts(problem, rho_data, delta, stream)
    diag = {
        "lambda_tilde": parts.lam,
        "d_norm": parts.d_norm,
        "trace_h_nu_inv": parts.trace,
        "c1": parts.c1,
        "c2": parts.c2,
        "delta": delta,
        "nu": nu,
    }
    if parts.lam >= 1:
        return BoundReport("interior", math.nan, math.nan, math.nan, 2 * rho_data, NOT_EVALUATED, math.nan,
                           False, f"lambda_tilde = {parts.lam:.6g} >= 1", diag)
    c1b = parts.c1 / (1 - parts.lam)
    c2b = parts.c2 / (1 - parts.lam)
    variance = _variance(tau, parts.trace)
    tail = NOT_EVALUATED
    delta0 = 0.0
    if evaluate_tail:
        y_obs = problem.y_exact if y is None else np.asarray(y, dtype=float)
        delta0 = tail_ratio(problem, y_obs, delta, tail_budget, stream)
        tail = delta0 / (1 + delta0)
        diag["delta0"] = delta0
    radius, mass, dstar = _delta_star(parts, tau, p, rho_data, nu, delta, c1b, c2b, delta0)
    diag.update(radius=radius, ball_mass=mass, delta_star_k=dstar)
    local = c1b * rho_data + c2b * nu + variance * ((1 + dstar) if inflate else 1.0)
    terms = [2 * rho_data, local] + ([tail] if evaluate_tail else [])
    return BoundReport("interior", c1b, c2b * nu, variance, 2 * rho_data, tail, float(max(terms)), True, "", diag)


def grid_bound(problem: GlipProblem, n: int, p: int, rho_tilde: float, delta_tilde: float,
               evaluate_tail: bool = False, tail_budget: int = 20000, stream=None) -> BoundReport:
    """Bound in the normalized metric ``||x - x_star|| / sqrt(p)``.

    The data term scales by ``sqrt(n / p)``, the prior bias and variance by
    ``1 / sqrt(p)``, and the localization radius is ``delta_tilde sqrt(p)``.
    Side conditions are evaluated and recorded in the diagnostics.
    """
    if (n, p) != (problem.n, problem.p):
        raise ValueError("n and p must match the problem dimensions")
    delta = delta_tilde * math.sqrt(p)
    rho = rho_tilde * math.sqrt(n)
    tau, nu = problem.tau, problem.nu
    parts = _interior_parts(problem, rho, delta, stream)
    diag = {"lambda_tilde": parts.lam, "d_norm": parts.d_norm, "trace_h_nu_inv": parts.trace,
            "c1": parts.c1, "c2": parts.c2, "delta": delta}
    ratio = math.sqrt(n / p)
    if parts.lam >= 1:
        return BoundReport("grid", math.nan, math.nan, math.nan, 2 * rho_tilde * ratio, NOT_EVALUATED, math.nan,
                           False, f"lambda_tilde = {parts.lam:.6g} >= 1", diag)
    c1b = parts.c1 / (1 - parts.lam)
    c2b = parts.c2 / (1 - parts.lam)
    # normalized argument 4 tau tr / p inside the log as well; see the rate discussion for grids
    variance = _variance(tau, parts.trace / p)
    diag["side_conditions"] = {
        "rho_scaled": rho_tilde * ratio,
        "delta_over_variance": p * delta_tilde**2 / (tau * parts.trace),
        "variance_per_dim": tau * parts.trace / p,
        "delta_rho_over_tau": delta_tilde**2 * rho_tilde**2 / tau,
    }
    data = 2 * rho_tilde * ratio
    local = c1b * rho_tilde * ratio + nu * c2b / math.sqrt(p) + variance
    terms = [data, local]
    tail = NOT_EVALUATED
    if evaluate_tail:
        d0 = tail_ratio(problem, problem.y_exact, delta, tail_budget, stream)
        tail = d0 / (math.sqrt(p) * (1 + d0))
        terms.append(tail)
        diag["delta0"] = d0
    return BoundReport("grid", c1b, nu * c2b / math.sqrt(p), variance, data, tail, float(max(terms)), True, "", diag)


# -- tail ratio Delta_0 ------------------------------------------------------------------


def laplace_normalizer_log(problem: GlipProblem, summary) -> float:
    """Log of the local Laplace mass of ``exp(-[h(x) - h(x_star)] / tau)``.

    Uses the block determinants of the curvature on the range of ``A^T``
    and of the prior precision on the null space of ``A``.
    """
    op = problem.operator
    tau, gamma, p = problem.tau, problem.gamma, problem.p
    x0, h = summary.x0, summary.H
    dets = summary.det_omega00 * summary.det_b11
    if dets <= 0:
        raise PreconditionError("block determinants must be positive")
    return (0.5 * op.p0 * math.log(tau) + op.p1 * math.log(gamma) + 0.5 * p * math.log(2 * math.pi)
            + float(x0 @ h @ x0) / (2 * tau) - 0.5 * math.log(dets))


def tail_ratio(problem: GlipProblem, y, delta: float, budget: int = 20000, stream=None) -> float:
    """Importance-sampling estimate of the posterior mass ratio outside/inside ``B(x_star, delta)``.

    The proposal is the Laplace Gaussian ``N(x_star - x0, s^2 tau H^-1)``
    widened by ``s = max(1, delta / sqrt(tau lambda_max(H^-1)))`` so that it
    reaches past the ball; only proposals outside the ball count.
    """
    rng = as_generator(stream)
    star = solve_x_star(problem)
    y = np.asarray(y, dtype=float)
    summary = laplace_summary(problem, y, star, with_map=False)
    tau, p = problem.tau, problem.p
    h_inv = np.linalg.inv(summary.H)
    scale = max(1.0, delta / math.sqrt(tau * np.linalg.eigvalsh(h_inv).max()))
    cov = scale**2 * tau * h_inv
    mean = summary.laplace_mean
    draws = rng.multivariate_normal(mean, cov, size=budget, method="cholesky")
    outside = np.linalg.norm(draws - star.x_star, axis=1) > delta
    if not np.any(outside):
        return 0.0
    from glip.infer import h_values

    h_star = h_value_grad_hess(problem, y, star.x_star)[0]
    vals = h_values(problem, y, draws[outside])
    log_q = stats.multivariate_normal(mean, cov).logpdf(draws[outside])
    log_w = -(vals - h_star) / tau - np.atleast_1d(log_q)
    log_w = log_w[np.isfinite(log_w)]
    if log_w.size == 0:
        return 0.0
    top = log_w.max()
    log_num = top + math.log(np.exp(log_w - top).sum() / budget)
    return math.exp(min(log_num - laplace_normalizer_log(problem, summary), 700.0))


# -- localization radius ------------------------------------------------------------------


def delta_schedule(tau: float, alpha_growth: float, a: float) -> float:
    """Localization radius ``(-tau log tau)^(1 / ((1 + a) alpha))``."""
    if not 0 < alpha_growth < 3:
        raise DomainError(f"alpha_growth = {alpha_growth!r} must lie in (0, 3)")
    if not 0 < tau < INV_E:
        raise DomainError("delta_schedule needs 0 < tau < 1/e")
    if a <= 0:
        raise DomainError("a must be positive")
    return (-tau * math.log(tau)) ** (1.0 / ((1 + a) * alpha_growth))


def ill_posed_gamma2(tau: float) -> float:
    """Prior scale ``gamma^2 = tau^(2/3) (log 1/tau)^(-1/6)`` for ill-posed problems."""
    if not 0 < tau < 1:
        raise DomainError("ill_posed_gamma2 needs 0 < tau < 1")
    return tau ** (2 / 3) * math.log(1 / tau) ** (-1 / 6)


# -- boundary bound ------------------------------------------------------------------------


def boundary_bound(
    problem: GlipProblem, rho_data: float, delta: float, delta0: float | None = None, corrections: bool = True
) -> BoundReport:
    """Ky Fan bound when ``x_star = 0`` sits at the corner of the orthant.

    Scalar constants are the largest diagonal entries of the matrix
    constants. ``delta0`` is the optional tail ratio; when absent it is
    taken as 0 inside the correction factors and omitted from ``overall``.
    With ``corrections=False`` the main term enters ``overall`` without its
    ``(1 + Delta_5)`` factor.
    """
    if problem.domain is not Domain.NONNEG:
        raise PreconditionError("the boundary bound needs the non-negative orthant")
    star = solve_x_star(problem)
    if np.any(np.abs(star.x_star) > 1e-12):
        raise PreconditionError("the boundary bound needs x_star = 0")
    tau, nu, p = problem.tau, problem.nu, problem.p
    y_exact = problem.y_exact
    _, b_star, _ = h_value_grad_hess(problem, y_exact, star.x_star)
    if np.any(b_star <= 0):
        i = int(np.flatnonzero(b_star <= 0)[0])
        raise PreconditionError(f"b_star[{i}] = {b_star[i]!r} is not positive; not a pure boundary problem")
    b_min = float(b_star.min())
    b_max = float(b_star.max())
    m_f1, c_f2 = _boundary_noise_scalars(problem, delta)
    c_g2 = float(np.abs(np.linalg.eigvalsh(grad_hess(problem.prior, star.x_star)[2])).max())
    data_part = m_f1 * rho_data / b_min if rho_data > 0 else 0.0
    d11 = data_part + delta * p * (c_f2 + nu * c_g2 / 2) / b_min
    arg = tau / (math.sqrt(p) * b_min)
    main = -(tau * math.sqrt(p) / b_min) * math.log(arg)
    diag = {"b_star": b_star, "b_min": b_min, "delta_11": d11, "m_f1": m_f1, "c_f2": c_f2, "c_g2": c_g2, "delta": delta}
    d0 = 0.0 if delta0 is None else float(delta0)
    if not d11 < 1:
        return BoundReport("boundary", math.nan, math.nan, main, 2 * rho_data, NOT_EVALUATED, math.nan, False,
                           f"Delta_11 = {d11:.6g} >= 1", diag)
    with np.errstate(over="ignore", divide="ignore"):
        d1 = -1 + ((1 - d11) / (1 + d11)) ** p * (1 - math.exp(-b_max * (1 + d11) * delta / (math.sqrt(p) * tau))) ** p
        num = math.log((1 + d1) / (1 + d0)) if 1 + d1 > 0 else -math.inf
        d4 = num / math.log(math.sqrt(p) * b_min * (1 - d11) / tau)
        d5 = -1 + (1 + d4) / (1 - d11) * (1 - math.log(1 - d11) / math.log(arg))
    diag.update(delta_1=d1, delta_4=d4, delta_5=d5)
    terms = [2 * rho_data, main * (1 + d5) if corrections else main]
    tail = NOT_EVALUATED
    if delta0 is not None:
        tail = d0
        terms.append(d0)
    return BoundReport("boundary", 0.0, 0.0, main, 2 * rho_data, tail, float(max(terms)), True, "", diag)


def _boundary_noise_scalars(problem, delta):
    """Largest first and second likelihood derivative bounds near ``y_exact``."""
    noise = problem.noise
    y = problem.y_exact
    reach = delta * float(np.abs(problem.operator.matrix).sum())
    if noise.kind is NoiseKind.GAUSSIAN:
        inv = float((1.0 / noise.shape).max())
        return inv, inv
    if noise.kind is NoiseKind.SCALED_POISSON:
        with np.errstate(divide="ignore"):
            m_f1 = float(np.where(y > 0, 1.0 / np.where(y > 0, y, 1.0), np.inf).max())
        c_f2 = float(noise.nll_hess(y, y + reach).max()) if np.all(y + reach > 0) else math.inf
        return m_f1, c_f2
    if noise.kind is NoiseKind.GAMMA:
        m_f1 = float((noise.shape / y**2).max())
        lo = y - reach
        if np.any(lo <= 0):
            return m_f1, math.inf
        return m_f1, float(np.maximum(noise.nll_hess(y, lo), noise.nll_hess(y, y + reach)).max())
    raise PreconditionError("the boundary bound needs a canonical noise family")


# -- Knapik sums -------------------------------------------------------------------------------


def knapik_sum(a: float, m: float, v: float, nu: float, n: int) -> tuple[float, float]:
    """Exact ``sum_{i<=n} i^(-a-1) / (1 + i^(-m) / nu)^v`` and its bound shape with C = 1.

    The bound has three branches: ``a > 0, m > 0``; ``a <= 0, m > 0`` with
    ``nu <= n^-m``; and ``m <= 0``. The log factor ``(log n)^I(a = v m)``
    vanishes at ``n = 1``.
    """
    if n < 1 or v <= 0 or nu <= 0:
        raise ValueError("knapik_sum needs n >= 1, v > 0 and nu > 0")
    i = np.arange(1, n + 1, dtype=float)
    log_terms = (-a - 1) * np.log(i) - v * np.log1p(i ** (-m) / nu)
    exact = float(np.exp(log_terms).sum())
    critical = math.isclose(a, v * m, rel_tol=0, abs_tol=1e-12)
    log_factor = math.log(n) if critical else 1.0
    if m > 0 and a > 0:
        shape = nu**v * min(nu ** (-1 / m), n) ** max(v * m - a, 0.0) * log_factor
    elif m > 0:
        if nu > n ** (-m) * (1 + 1e-12):
            raise DomainError("the a <= 0 branch needs nu <= n^-m")
        shape = nu**v * float(n) ** (v * m - a)
    else:
        shape = nu**v * float(n) ** max(v * m - a, 0.0) * log_factor
    return exact, float(shape)


# -- spectral rates ----------------------------------------------------------------------------


class Regime(str, enum.Enum):
    SELF_REGULARIZED = "self-regularized"
    MILD = "mild"
    CRITICAL = "critical"


def poisson_information_exponent(alpha: float, beta: float) -> float:
    return alpha + beta + 0.5


def gamma_information_exponent(alpha: float, beta: float) -> float:
    return 2 * (alpha + beta + 0.5)


@dataclass(frozen=True)
class SpectralSpec:
    """Diagonal model with singular values ``j^-alpha``, truth ``j^(-beta-1/2)`` and prior precision ``j^(2 kappa + 1)``.

    ``s`` is the growth exponent of the likelihood curvature in the data
    coordinates (0 for Gaussian noise).
    """

    alpha: float
    beta: float
    kappa: float
    s: float
    p: int = 100
    tau: float = 1e-3
    nu: float = 1e-3

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise DomainError("alpha and beta must be positive")
        if self.kappa <= 0:
            raise DomainError("kappa must be positive")
        if self.m <= 0:
            raise DomainError(f"m = 2 alpha - s + 2 kappa + 1 = {self.m!r} must be positive")

    @property
    def m(self) -> float:
        return 2 * self.alpha - self.s + 2 * self.kappa + 1

    @classmethod
    def poisson(cls, alpha, beta, kappa=None, **kw) -> SpectralSpec:
        kappa = beta if kappa is None else kappa
        return cls(alpha, beta, kappa, poisson_information_exponent(alpha, beta), **kw)

    @classmethod
    def gaussian(cls, alpha, beta, kappa=None, **kw) -> SpectralSpec:
        kappa = beta if kappa is None else kappa
        return cls(alpha, beta, kappa, 0.0, **kw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("alpha", "beta", "kappa", "s", "p", "tau", "nu")}


def spectral_regime(spec: SpectralSpec) -> tuple[Regime, float]:
    """Regime and contraction exponent in ``tau log(1/tau)``."""
    a, s = spec.alpha, spec.s
    if s > 2 * a + 1:
        return Regime.SELF_REGULARIZED, 0.5
    if math.isclose(s, 2 * a + 1):
        return Regime.CRITICAL, 0.5
    k = min(spec.beta, spec.m)
    return Regime.MILD, k / (2 * k + 2 * a + 1 - s)


def spectral_terms(spec: SpectralSpec) -> tuple[float, float, float]:
    """Truncation, prior-bias and variance terms of the spectral bound with C = 1."""
    a, b, s, m, p = spec.alpha, spec.beta, spec.s, spec.m, spec.p
    tau, nu = spec.tau, spec.nu
    if tau <= 0 or nu <= 0 or p < 2:
        raise DomainError("spectral_rate needs tau > 0, nu > 0 and p >= 2")
    cut = nu ** (-1 / m)
    t1 = max(p, cut) ** (-b)
    t2 = nu * min(cut, p) ** max(m - b, 0.0) * math.log(p) ** (0.5 if math.isclose(b, m) else 0.0)
    crit = math.isclose(s, 2 * a + 1)
    t3 = math.sqrt(tau) * min(cut, p) ** max(a - s / 2 + 0.5, 0.0) * math.log(p / tau) ** ((1 + crit) / 2)
    return t1, t2, t3


def spectral_rate(spec: SpectralSpec) -> tuple[float, float, Regime]:
    """Three-term spectral bound at ``(tau, nu, p)`` with C = 1, exponent and regime."""
    regime, exponent = spectral_regime(spec)
    return sum(spectral_terms(spec)), exponent, regime


def spectral_nu(spec: SpectralSpec, tau: float) -> float:
    """Prior coupling ``nu`` that balances the spectral bound at ``tau``.

    In the mild regime ``nu = (tau log(1/tau)^(1 + k))^(m / (2 min(beta, m) + 2 alpha + 1 - s))``
    with ``k = I(alpha = (1 - s)/2) - I(beta = m)``; otherwise the prior
    scale is held fixed, ``nu = tau``.
    """
    regime, _ = spectral_regime(spec)
    if regime is not Regime.MILD:
        return tau
    a, b, s, m = spec.alpha, spec.beta, spec.s, spec.m
    k = float(math.isclose(a, (1 - s) / 2)) - float(math.isclose(b, m))
    base = tau * math.log(1 / tau) ** (1 + k)
    return base ** (m / (2 * min(b, m) + 2 * a + 1 - s))


# -- predicted exponents --------------------------------------------------------------------


class ProblemClass(str, enum.Enum):
    WELL_POSED_INTERIOR = "well-posed-interior"
    ILL_POSED_INTERIOR = "ill-posed-interior"
    BOUNDARY_WELL_POSED = "boundary-well-posed"


def predicted_exponent(problem_class) -> float:
    """Slope of log Ky Fan distance against ``log(tau log(1/tau))``.

    ``problem_class`` is a :class:`ProblemClass` (or its string value) or a
    :class:`SpectralSpec`.
    """
    if isinstance(problem_class, SpectralSpec):
        return spectral_regime(problem_class)[1]
    cls = ProblemClass(problem_class)
    return {
        ProblemClass.WELL_POSED_INTERIOR: 0.5,
        ProblemClass.ILL_POSED_INTERIOR: 1 / 3,
        ProblemClass.BOUNDARY_WELL_POSED: 1.0,
    }[cls]
