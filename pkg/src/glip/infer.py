"""
Posterior machinery for generalised linear inverse problems.

The posterior density is proportional to ``exp(-h_y(x) / tau)`` with
``h_y(x) = f_y(x) + nu g(x)``, where ``f_y`` is the negative
log-likelihood (times ``tau``) as a function of ``x`` and ``nu = tau /
gamma^2``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from glip import forward as fwd
from glip.errors import ConvergenceError, DomainError, PreconditionError
from glip.forward import ForwardOperator, LinkMap
from glip.noise import NoiseFamily, NoiseKind
from glip.prior import PriorModel, StarPoint, g_values, grad_hess

log = logging.getLogger(__name__)


class Domain(str, enum.Enum):
    ALL_REALS = "reals"
    NONNEG = "nonneg"


@dataclass(frozen=True, eq=False)
class GlipProblem:
    noise: NoiseFamily
    operator: ForwardOperator
    prior: PriorModel
    x_true: np.ndarray
    tau: float
    link: LinkMap = field(default_factory=LinkMap.identity)
    domain: Domain = Domain.ALL_REALS

    def __post_init__(self):
        x = np.asarray(self.x_true, dtype=float)
        object.__setattr__(self, "x_true", x)
        object.__setattr__(self, "domain", Domain(self.domain))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if x.shape != (self.operator.p,):
            raise ValueError(f"x_true has shape {x.shape}, operator has p = {self.operator.p}")
        if self.noise.n != self.operator.n:
            raise ValueError(f"noise dimension {self.noise.n} != operator rows {self.operator.n}")
        if self.prior.is_gaussian and self.prior.precision.shape[0] != self.operator.p:
            raise ValueError("prior dimension does not match the operator")
        if self.domain is Domain.NONNEG and np.any(x < 0):
            raise DomainError("x_true lies outside the non-negative orthant")
        y = self.y_exact
        if self.noise.kind is NoiseKind.SCALED_POISSON:
            if np.any(y < 0):
                raise DomainError("rescaled Poisson noise needs y_exact >= 0")
        elif self.noise.kind is NoiseKind.GAMMA:
            self.noise.check_eta(y)

    @property
    def n(self) -> int:
        return self.operator.n

    @property
    def p(self) -> int:
        return self.operator.p

    @property
    def gamma(self) -> float:
        return self.prior.gamma

    @property
    def nu(self) -> float:
        # (sqrt(tau) / gamma)^2 underflows to 0 for huge gamma instead of overflowing
        return float((math.sqrt(self.tau) / self.prior.gamma) ** 2) if self.prior.gamma > 1e100 else self.tau / self.prior.gamma**2

    @property
    def y_exact(self) -> np.ndarray:
        return fwd.link_apply(self.link, self.operator.matrix @ self.x_true)

    @property
    def conjugate(self) -> bool:
        """Gaussian noise, Gaussian prior, identity link, no constraint."""
        return (
            self.noise.kind is NoiseKind.GAUSSIAN
            and self.prior.is_gaussian
            and self.link.is_identity
            and self.domain is Domain.ALL_REALS
        )

    @property
    def separable(self) -> bool:
        """Posterior factorises over coordinates."""
        return self.operator.is_diagonal and self.prior.is_diagonal

    def with_tau(self, tau: float, gamma: float | None = None) -> GlipProblem:
        prior = self.prior if gamma is None else self.prior.with_gamma(gamma)
        return replace(self, tau=float(tau), prior=prior)


# -- h_y and derivatives ------------------------------------------------------


def _mu_derivs(problem, y, mu):
    link = problem.link
    eta = fwd.link_apply(link, mu)
    g1 = fwd.link_derivative(link, mu)
    noise = problem.noise
    d1 = noise.nll_grad(y, eta)
    d2 = noise.nll_hess(y, eta)
    if link.is_identity:
        return eta, d1, d2
    g2 = fwd.link_second(link, mu)
    return eta, d1 * g1, d2 * g1**2 + d1 * g2


def h_value_grad_hess(problem: GlipProblem, y, x) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of ``h_y`` at ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if problem.domain is Domain.NONNEG and np.any(x < 0):
        raise DomainError("x lies outside the non-negative orthant")
    a = problem.operator.matrix
    mu = a @ x
    eta, d1, d2 = _mu_derivs(problem, y, mu)
    f = float(np.sum(problem.noise.nll(y, eta, strict=True)))
    gval, ggrad, ghess = grad_hess(problem.prior, x)
    nu = problem.nu
    grad = a.T @ d1 + nu * ggrad
    hess = (a.T * d2) @ a + nu * ghess
    return f + nu * gval, grad, 0.5 * (hess + hess.T)


def likelihood_curvature(problem: GlipProblem, y, x) -> np.ndarray:
    """Diagonal of the Hessian of the negative log-likelihood in ``A x``."""
    mu = problem.operator.matrix @ np.asarray(x, dtype=float)
    return _mu_derivs(problem, np.asarray(y, dtype=float), mu)[2]


def h_values(problem: GlipProblem, y, xs) -> np.ndarray:
    """``h_y`` on each row of ``xs``; ``+inf`` where inadmissible.

    ``y`` is either one data vector or one per row.
    """
    xs = np.asarray(xs, dtype=float)
    a = problem.operator.matrix
    if problem.operator.is_diagonal:
        mu = xs * np.diag(a)
    else:
        mu = np.einsum("kp,np->kn", xs, a)
    eta = mu if problem.link.is_identity else problem.link.forward(mu)
    with np.errstate(invalid="ignore", over="ignore"):
        f = np.sum(problem.noise.nll(y, eta, strict=False), axis=-1)
        out = f + problem.nu * g_values(problem.prior, xs)
    if problem.domain is Domain.NONNEG:
        out = np.where(np.any(xs < 0, axis=-1), np.inf, out)
    return np.where(np.isnan(out), np.inf, out)


def _coordinate_h(problem: GlipProblem, y, xs) -> np.ndarray:
    """Per-coordinate terms of ``h_y`` for a separable problem."""
    a = np.diag(problem.operator.matrix)
    mu = xs * a
    eta = mu if problem.link.is_identity else problem.link.forward(mu)
    prior = problem.prior
    with np.errstate(invalid="ignore", over="ignore"):
        out = problem.noise.nll(y, eta, strict=False)
        out = out + problem.nu * 0.5 * np.diag(prior.precision) * (xs - prior.mean) ** 2
    if problem.domain is Domain.NONNEG:
        out = np.where(xs < 0, np.inf, out)
    return np.where(np.isnan(out), np.inf, out)


# -- bounds of the feasible box ---------------------------------------------------


def feasible_box(problem: GlipProblem, y) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate bounds ``lo <= x <= hi`` of the posterior support.

    The shifted exponential likelihood confines ``A x <= y``; this is a box
    only for a diagonal operator with positive entries, the one case
    supported.
    """
    p = problem.p
    lo = np.zeros(p) if problem.domain is Domain.NONNEG else np.full(p, -np.inf)
    hi = np.full(p, np.inf)
    if problem.noise.kind is NoiseKind.SHIFTED_EXPONENTIAL:
        op = problem.operator
        if not (op.is_diagonal and np.all(np.diag(op.matrix) > 0) and problem.link.is_identity):
            raise DomainError(
                "shifted exponential noise is supported only with a positive diagonal operator and identity link"
            )
        hi = np.asarray(y, dtype=float) / np.diag(op.matrix)
    return lo, hi


# -- MAP ----------------------------------------------------------------------------


def map_estimate(problem: GlipProblem, y, x_init=None, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Projected-Newton minimiser of ``h_y`` over the feasible box."""
    return _map_with_info(problem, y, x_init, tol, max_iter)[0]


def _map_with_info(problem, y, x_init, tol, max_iter):
    y = np.asarray(y, dtype=float)
    lo, hi = feasible_box(problem, y)
    x = np.zeros(problem.p) if x_init is None else np.asarray(x_init, dtype=float)
    x = np.clip(x, lo, hi)
    if not np.isfinite(h_values(problem, y, x[None])[0]):
        x = _admissible_start(problem, y, x, lo, hi)
    trace = []
    for it in range(max_iter):
        val, grad, hess = h_value_grad_hess(problem, y, x)
        pg = x - np.clip(x - grad, lo, hi)
        pg_norm = float(np.linalg.norm(pg))
        trace.append((it, val, pg_norm))
        if pg_norm < tol:
            return x, it
        eps = min(1e-12, pg_norm)
        active = ((x <= lo + eps) & (grad > 0)) | ((x >= hi - eps) & (grad < 0))
        free = ~active
        d = np.zeros_like(x)
        if np.any(free):
            hf = hess[np.ix_(free, free)]
            d[free] = _newton_direction(hf, grad[free], problem)
        if np.any(active):
            scale = 1.0 / max(float(np.max(np.abs(np.diag(hess)))), 1e-300)
            d[active] = -grad[active] * min(scale, 1.0)
        t = 1.0
        while True:
            cand = np.clip(x + t * d, lo, hi)
            cval = h_values(problem, y, cand[None])[0]
            decrease = float(grad[free] @ (cand - x)[free]) + float(grad[active] @ (cand - x)[active])
            if np.isfinite(cval) and cval <= val + 1e-4 * decrease + 1e-15 * abs(val):
                break
            t *= 0.5
            if t < 1e-20:
                if pg_norm < 1e-6 * (1.0 + float(np.linalg.norm(grad))):
                    return x, it
                raise ConvergenceError("MAP line search failed", x, trace)
        step = float(np.linalg.norm(cand - x))
        x = cand
        if step <= 1e-15 * (1.0 + float(np.linalg.norm(x))) and pg_norm < 1e-6:
            return x, it
    raise ConvergenceError("MAP estimate did not converge", x, trace)


def _newton_direction(hf, gf, problem):
    try:
        c, low = linalg.cho_factor(hf)
        return -linalg.cho_solve((c, low), gf)
    except linalg.LinAlgError:
        pass
    w = np.linalg.eigvalsh(hf)
    if problem.nu == 0 and problem.operator.p1 > 0 and w.min() <= 1e-14 * max(1.0, abs(w).max()):
        raise PreconditionError("Hessian is singular on an ill-posed problem with nu = 0; use nu > 0")
    shift = max(0.0, -w.min()) + 1e-8 * max(1.0, abs(w).max())
    return -np.linalg.solve(hf + shift * np.eye(hf.shape[0]), gf)


def _admissible_start(problem, y, x, lo, hi):
    """Pull a starting point into the region where ``h`` is finite."""
    for cand in (problem.x_true, np.clip(problem.x_true, lo, hi), 0.5 * (np.clip(lo, -1, 1) + np.clip(hi, -1, 1))):
        cand = np.clip(np.asarray(cand, dtype=float), lo, hi)
        if np.isfinite(h_values(problem, y, cand[None])[0]):
            return cand
    raise DomainError("no admissible starting point for the MAP search")


# -- Laplace summary -------------------------------------------------------------------


@dataclass(frozen=True)
class PosteriorSummary:
    x_star: np.ndarray
    x_map: np.ndarray | None
    H: np.ndarray
    H_nu: np.ndarray
    x0: np.ndarray
    det_omega00: float
    det_b11: float
    interior: bool
    grad_h: np.ndarray

    @property
    def laplace_mean(self) -> np.ndarray:
        """One Newton step from ``x_star``; the exact mode for quadratic ``h``."""
        return self.x_star - self.x0

    def laplace_covariance(self, tau: float) -> np.ndarray:
        return tau * np.linalg.inv(self.H)


def _det(m):
    return float(np.linalg.det(m)) if m.size else 1.0


def laplace_summary(problem: GlipProblem, y, star: StarPoint, with_map: bool = True) -> PosteriorSummary:
    y = np.asarray(y, dtype=float)
    x_star = star.x_star
    a = problem.operator.matrix
    nu = problem.nu
    bmat = grad_hess(problem.prior, x_star)[2]
    v_y = likelihood_curvature(problem, y, x_star)
    v_exact = likelihood_curvature(problem, problem.y_exact, x_star)
    h_mat = (a.T * v_y) @ a + nu * bmat
    h_nu = (a.T * v_exact) @ a + nu * bmat
    h_mat = 0.5 * (h_mat + h_mat.T)
    h_nu = 0.5 * (h_nu + h_nu.T)
    _, grad, _ = h_value_grad_hess(problem, y, x_star)
    try:
        x0 = np.linalg.solve(h_mat, grad)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("curvature matrix H is singular") from exc
    if np.linalg.cond(h_mat) > 1e15:
        raise PreconditionError("curvature matrix H is numerically singular")
    op = problem.operator
    u0 = op.basis[: op.p0].T
    u1 = op.basis[op.p0 :].T
    omega00 = u0.T @ ((a.T * v_exact) @ a) @ u0
    b11 = u1.T @ bmat @ u1
    x_map = map_estimate(problem, y, x_star) if with_map else None
    return PosteriorSummary(x_star, x_map, h_mat, h_nu, x0, _det(omega00), _det(b11), star.interior, grad)


# -- sampling -------------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerSettings:
    burn_in: int = 1000
    thin: int = 2
    target_accept: float = 0.3
    method: str = "auto"
    block: int = 256

    def __post_init__(self):
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")
        if self.method not in ("auto", "exact", "rwm"):
            raise ValueError(f"unknown sampler method {self.method!r}")


@dataclass
class PosteriorDraws:
    draws: np.ndarray
    method: str
    acceptance_rate: float = 1.0
    chain_length: int = 0
    warnings: list = field(default_factory=list)


def sample_posterior(
    problem: GlipProblem,
    y,
    count: int,
    stream: np.random.Generator,
    settings: SamplerSettings | None = None,
    x_init=None,
) -> PosteriorDraws:
    """Draws from the posterior: exact in the conjugate case, else random-walk Metropolis."""
    inits = None if x_init is None else [x_init]
    return sample_posterior_batch(problem, [y], count, [stream], settings, inits)[0]


def sample_posterior_batch(problem, ys, count, streams, settings=None, x_inits=None) -> list[PosteriorDraws]:
    """Independent posterior samples for several data vectors.

    Chain ``r`` uses only ``streams[r]``, and all arithmetic is elementwise
    across chains, so each result is the same whatever batch it runs in.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    settings = settings or SamplerSettings()
    ys = np.asarray(ys, dtype=float)
    method = settings.method
    if method == "auto":
        method = "exact" if problem.conjugate else "rwm"
    if method == "exact":
        if not problem.conjugate:
            raise ValueError("exact sampling needs the conjugate Gaussian model")
        return [_sample_conjugate(problem, y, count, s) for y, s in zip(ys, streams)]
    if x_inits is None:
        x_inits = [map_estimate(problem, y, _default_init(problem)) for y in ys]
    if problem.separable:
        return _rwm_separable(problem, ys, count, streams, settings, np.asarray(x_inits))
    return _rwm_dense(problem, ys, count, streams, settings, np.asarray(x_inits))


def _default_init(problem):
    from glip.prior import solve_x_star

    return solve_x_star(problem).x_star


def conjugate_posterior(problem: GlipProblem, y) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the Gaussian posterior (conjugate case)."""
    a = problem.operator.matrix
    w = 1.0 / problem.noise.shape
    prior = problem.prior
    prec = (a.T * w) @ a + problem.nu * prior.precision
    rhs = a.T @ (w * np.asarray(y, dtype=float)) + problem.nu * prior.precision @ prior.mean
    mean = np.linalg.solve(prec, rhs)
    return mean, problem.tau * np.linalg.inv(prec)


def _sample_conjugate(problem, y, count, stream):
    mean, cov = conjugate_posterior(problem, y)
    chol = np.linalg.cholesky(cov)
    z = stream.standard_normal((count, problem.p))
    return PosteriorDraws(mean + z @ chol.T, "exact", 1.0, count)


def _proposal_precision(problem, y, x):
    """Curvature of ``h`` at ``x`` plus a term for active bounds.

    Near a bound where ``h`` grows linearly with slope ``s`` the posterior
    has length scale ``tau / |s|``, which the squared slope term encodes.
    """
    lo, hi = feasible_box(problem, y)
    _, grad, hess = h_value_grad_hess(problem, y, x)
    at_bound = (x <= lo + 1e-12) | (x >= hi - 1e-12)
    slope = np.where(at_bound, grad, 0.0)
    return hess + np.diag(slope**2 / problem.tau)


class _Blocks:
    """Per-chain buffered standard normals and uniforms."""

    def __init__(self, streams, width, block):
        self.streams = streams
        self.width = width
        self.block = block
        self.pos = block
        self.z = self.u = None

    def next(self):
        if self.pos == self.block:
            zs, us = [], []
            for s in self.streams:
                zs.append(s.standard_normal((self.block, self.width)))
                us.append(s.random((self.block, self.width)))
            self.z = np.stack(zs, axis=1)
            self.u = np.stack(us, axis=1)
            self.pos = 0
        i = self.pos
        self.pos += 1
        return self.z[i], self.u[i]


def _robbins_monro(t):
    return 1.0 / (t + 1) ** 0.6


def _finish(samples, accepted, retained_steps, count, method):
    out = []
    for r in range(samples.shape[0]):
        rate = float(accepted[r]) / max(retained_steps, 1)
        warn = []
        if retained_steps and not 0.05 <= rate <= 0.8:
            warn.append(f"acceptance rate {rate:.3f} outside [0.05, 0.8]")
        out.append(PosteriorDraws(samples[r], method, rate, retained_steps, warn))
    return out


def _rwm_dense(problem, ys, count, streams, settings, x_inits):
    k, p = x_inits.shape
    tau = problem.tau
    chol = np.empty((k, p, p))
    for r in range(k):
        prec = _proposal_precision(problem, ys[r], x_inits[r])
        cov = tau * _safe_inverse(prec)
        chol[r] = np.linalg.cholesky(cov)
    log_scale = np.full(k, np.log(2.38 / np.sqrt(p)))
    x = x_inits.copy()
    cur = -h_values(problem, ys, x) / tau
    blocks = _Blocks(streams, p, settings.block)
    total = settings.burn_in + count * settings.thin
    samples = np.empty((k, count, p))
    accepted = np.zeros(k)
    kept = 0
    for t in range(total):
        z, u = blocks.next()
        step = np.einsum("kij,kj->ki", chol, z) * np.exp(log_scale)[:, None]
        prop = x + step
        new = -h_values(problem, ys, prop) / tau
        with np.errstate(invalid="ignore", over="ignore"):
            logr = np.where(np.isfinite(new), new - cur, -np.inf)
        acc = np.log(u[:, 0]) < logr
        x = np.where(acc[:, None], prop, x)
        cur = np.where(acc, new, cur)
        if t < settings.burn_in:
            prob = np.exp(np.minimum(logr, 0.0))
            log_scale += _robbins_monro(t) * (prob - settings.target_accept)
        else:
            accepted += acc
            j = t - settings.burn_in
            if (j + 1) % settings.thin == 0:
                samples[:, kept] = x
                kept += 1
    return _finish(samples, accepted, total - settings.burn_in, count, "rwm")


def _rwm_separable(problem, ys, count, streams, settings, x_inits):
    """Coordinatewise random-walk Metropolis; exact for a product posterior."""
    k, p = x_inits.shape
    tau = problem.tau
    sd = np.empty((k, p))
    for r in range(k):
        prec = np.diag(_proposal_precision(problem, ys[r], x_inits[r]))
        sd[r] = np.sqrt(tau / np.maximum(prec, 1e-300))
    sd = np.where(np.isfinite(sd), sd, 1.0)
    log_scale = np.full((k, p), np.log(2.38))
    x = x_inits.copy()
    cur = -_coordinate_h(problem, ys, x) / tau
    blocks = _Blocks(streams, p, settings.block)
    total = settings.burn_in + count * settings.thin
    samples = np.empty((k, count, p))
    accepted = np.zeros(k)
    kept = 0
    for t in range(total):
        z, u = blocks.next()
        prop = x + sd * np.exp(log_scale) * z
        new = -_coordinate_h(problem, ys, prop) / tau
        with np.errstate(invalid="ignore", over="ignore"):
            logr = np.where(np.isfinite(new), new - cur, -np.inf)
        acc = np.log(u) < logr
        x = np.where(acc, prop, x)
        cur = np.where(acc, new, cur)
        if t < settings.burn_in:
            log_scale += _robbins_monro(t) * (np.exp(np.minimum(logr, 0.0)) - settings.target_accept)
        else:
            accepted += acc.mean(axis=1)
            j = t - settings.burn_in
            if (j + 1) % settings.thin == 0:
                samples[:, kept] = x
                kept += 1
    return _finish(samples, accepted, total - settings.burn_in, count, "rwm-coordinatewise")


def _safe_inverse(prec):
    prec = 0.5 * (prec + prec.T)
    w, v = np.linalg.eigh(prec)
    floor = 1e-10 * max(float(np.abs(w).max()), 1e-300)
    w = np.maximum(w, floor)
    return (v / w) @ v.T
