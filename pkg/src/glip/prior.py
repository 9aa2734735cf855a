"""
Priors ``p(x) ∝ exp(-g(x) / gamma^2)`` and the concentration point.

The concentration point minimises ``g`` over the affine set of parameters
that reproduce the exact data, ``{x : A x = A x_true}``, optionally
restricted to the non-negative orthant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from glip.errors import ConvergenceError, PreconditionError

NEWTON_MAX_ITER = 200
ARMIJO_FACTOR = 0.5
ARMIJO_SLOPE = 1e-4


@dataclass(frozen=True, eq=False)
class PriorModel:
    """Gaussian-precision or generic smooth prior with scale ``gamma``.

    For the Gaussian kind ``g(x) = (x - m0)^T B (x - m0) / 2``; ``B`` may be
    singular as long as it is positive definite on the null space of the
    forward operator. Generic priors carry callables for ``g`` and its first
    two derivatives plus an optional smoothness matrix ``c_g`` bounding the
    change of the Hessian per unit distance.
    """

    kind: str
    gamma: float
    precision: np.ndarray | None = None
    mean: np.ndarray | None = None
    g: Callable | None = None
    grad: Callable | None = None
    hess: Callable | None = None
    c_g: np.ndarray | None = None
    spec: dict | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.kind == "gaussian":
            b = np.atleast_2d(np.asarray(self.precision, dtype=float))
            if b.shape[0] != b.shape[1]:
                raise ValueError("precision must be square")
            if not np.allclose(b, b.T, rtol=0, atol=1e-12 * max(1.0, np.abs(b).max())):
                raise ValueError("precision must be symmetric")
            if np.linalg.eigvalsh(b).min() < -1e-10 * max(1.0, np.abs(b).max()):
                raise ValueError("precision must be positive semidefinite")
            m0 = np.zeros(b.shape[0]) if self.mean is None else np.asarray(self.mean, dtype=float)
            if m0.shape != (b.shape[0],):
                raise ValueError("prior mean has the wrong length")
            object.__setattr__(self, "precision", b)
            object.__setattr__(self, "mean", m0)
        elif self.kind == "generic":
            if self.g is None or self.grad is None or self.hess is None:
                raise ValueError("generic priors need g, grad and hess callables")
        else:
            raise ValueError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def gaussian(cls, precision, mean=None, gamma: float = 1.0, spec: dict | None = None) -> PriorModel:
        return cls("gaussian", float(gamma), precision=precision, mean=mean, spec=spec)

    @classmethod
    def generic(cls, g, grad, hess, gamma: float = 1.0, c_g=None) -> PriorModel:
        return cls("generic", float(gamma), g=g, grad=grad, hess=hess, c_g=c_g)

    @classmethod
    def from_config(cls, cfg: dict, p: int) -> PriorModel:
        """Build a Gaussian prior from a config mapping.

        ``precision`` is a scalar, a list of diagonal entries, or the string
        ``"sobolev"`` with ``kappa`` giving entries ``j^(2 kappa + 1)``.
        """
        prec = cfg.get("precision", 1.0)
        if isinstance(prec, str):
            if prec != "sobolev":
                raise ValueError(f"unknown precision spec {prec!r}")
            kappa = float(cfg["kappa"])
            diag = np.arange(1, p + 1, dtype=float) ** (2 * kappa + 1)
        elif np.isscalar(prec):
            diag = np.full(p, float(prec))
        else:
            diag = np.asarray(prec, dtype=float)
        mean = cfg.get("mean")
        mean = np.zeros(p) if mean is None else np.broadcast_to(np.asarray(mean, dtype=float), (p,)).copy()
        return cls.gaussian(np.diag(diag), mean, float(cfg.get("gamma", 1.0)), spec=dict(cfg))

    def with_gamma(self, gamma: float) -> PriorModel:
        from dataclasses import replace

        return replace(self, gamma=float(gamma))

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian"

    @property
    def is_diagonal(self) -> bool:
        if not self.is_gaussian:
            return False
        b = self.precision
        return bool(np.count_nonzero(b - np.diag(np.diag(b))) == 0)


def grad_hess(prior: PriorModel, x) -> tuple[float, np.ndarray, np.ndarray]:
    """Return ``(g(x), grad g(x), hess g(x))``."""
    x = np.asarray(x, dtype=float)
    if prior.is_gaussian:
        r = x - prior.mean
        br = prior.precision @ r
        return 0.5 * float(r @ br), br, prior.precision.copy()
    return float(prior.g(x)), np.asarray(prior.grad(x), dtype=float), np.asarray(prior.hess(x), dtype=float)


def g_values(prior: PriorModel, xs: np.ndarray) -> np.ndarray:
    """``g`` evaluated on each row of ``xs``."""
    if prior.is_gaussian:
        r = xs - prior.mean
        if prior.is_diagonal:
            return 0.5 * np.sum(r * r * np.diag(prior.precision), axis=-1)
        return 0.5 * np.einsum("...i,ij,...j->...", r, prior.precision, r)
    return np.array([prior.g(x) for x in xs])


def smoothness_matrix(prior: PriorModel, x_star, delta: float, stream=None, n_points: int = 64) -> np.ndarray:
    """Matrix ``C_g`` bounding ``|v^T (hess g(x) - hess g(x_star)) v| / delta``.

    Gaussian priors have constant curvature, so ``C_g = 0``. Generic priors
    use their ``c_g`` metadata when given; otherwise a heuristic estimate
    ``c I`` with ``c`` the largest eigenvalue magnitude of the Hessian
    change over random points of the ball, divided by ``delta``.
    """
    x_star = np.asarray(x_star, dtype=float)
    p = x_star.size
    if prior.is_gaussian:
        return np.zeros((p, p))
    if prior.c_g is not None:
        return np.atleast_2d(np.asarray(prior.c_g, dtype=float))
    if delta <= 0:
        return np.zeros((p, p))
    from glip.rng import as_generator

    rng = as_generator(stream)
    h0 = grad_hess(prior, x_star)[2]
    worst = 0.0
    for _ in range(n_points):
        v = rng.standard_normal(p)
        x = x_star + delta * rng.uniform() ** (1 / p) * v / np.linalg.norm(v)
        diff = grad_hess(prior, x)[2] - h0
        worst = max(worst, float(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.T))).max()))
    return (worst / delta) * np.eye(p)


@dataclass(frozen=True)
class StarPoint:
    x_star: np.ndarray
    residual: float
    interior: bool
    active: tuple = ()


def _null_basis(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    if a.size == 0:
        return np.eye(a.shape[1])
    _, sv, vt = np.linalg.svd(a, full_matrices=True)
    rank = int(np.count_nonzero(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return vt[rank:].T


def _solve_affine(prior: PriorModel, a: np.ndarray, target: np.ndarray, tol: float):
    """Minimise ``g`` over ``{x : a x = target}`` (all coordinates free)."""
    p = a.shape[1]
    xp, *_ = np.linalg.lstsq(a, target, rcond=None)
    resid = float(np.linalg.norm(a @ xp - target))
    if resid > max(tol, 1e-8) * max(1.0, float(np.linalg.norm(target))):
        raise PreconditionError("the affine constraint set is empty")
    basis = _null_basis(a)
    if basis.shape[1] == 0:
        return xp
    if prior.is_gaussian:
        b = prior.precision
        b11 = basis.T @ b @ basis
        _require_pd(b11)
        z = np.linalg.solve(b11, -basis.T @ (b @ (xp - prior.mean)))
        return xp + basis @ z
    return _affine_newton(prior, xp, basis, tol)


def _require_pd(b11):
    if b11.size and np.linalg.eigvalsh(0.5 * (b11 + b11.T)).min() <= 1e-12 * max(1.0, np.abs(b11).max()):
        raise PreconditionError("the prior precision restricted to the null space of A (B11) is singular")


def _affine_newton(prior, x, basis, tol):
    trace = []
    for it in range(NEWTON_MAX_ITER):
        val, grad, hess = grad_hess(prior, x)
        pg = basis.T @ grad
        trace.append((it, val, float(np.linalg.norm(pg))))
        if np.linalg.norm(pg) < tol:
            _require_pd(basis.T @ hess @ basis)
            return x
        h11 = basis.T @ hess @ basis
        try:
            step = -np.linalg.solve(h11, pg)
            if pg @ step >= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = -pg
        t = 1.0
        while True:
            cand = x + t * (basis @ step)
            cval = grad_hess(prior, cand)[0]
            if np.isfinite(cval) and cval <= val + ARMIJO_SLOPE * t * float(pg @ step):
                break
            t *= ARMIJO_FACTOR
            if t < 1e-14:
                raise ConvergenceError("line search failed in the x_star Newton solve", x, trace)
        x = cand
    raise ConvergenceError("x_star Newton solve did not converge", x, trace)


def _solve_orthant(prior, a, target, x0, tol, max_iter=100):
    """Active-set loop for ``min g`` on ``{a x = target, x >= 0}``."""
    p = a.shape[1]
    active = set(np.flatnonzero(x0 < -tol).tolist())
    x = x0
    for _ in range(max_iter):
        free = np.array([i for i in range(p) if i not in active], dtype=int)
        x = np.zeros(p)
        if free.size:
            x[free] = _solve_affine(_restrict(prior, free, p), a[:, free], target, tol)
        neg = [i for i in free if x[i] < -tol]
        if neg:
            active.add(int(min(neg, key=lambda i: x[i])))
            continue
        if not active:
            return np.maximum(x, 0.0), ()
        grad = grad_hess(prior, x)[1]
        idx = sorted(active)
        e = np.zeros((p, len(idx)))
        e[idx, range(len(idx))] = 1.0
        sol, *_ = np.linalg.lstsq(np.hstack([a.T, e]), grad, rcond=None)
        mult = sol[a.shape[0]:]
        worst = int(np.argmin(mult))
        if mult[worst] < -tol:
            active.discard(idx[worst])
            continue
        x[idx] = 0.0
        return np.maximum(x, 0.0), tuple(idx)
    raise ConvergenceError("active-set loop for x_star did not terminate", x)


def _restrict(prior, free, p):
    if prior.is_gaussian:
        b = prior.precision
        return PriorModel.gaussian(b[np.ix_(free, free)], prior.mean[free], prior.gamma)

    def lift(z):
        x = np.zeros(p)
        x[free] = z
        return x

    return PriorModel.generic(
        lambda z: prior.g(lift(z)),
        lambda z: np.asarray(prior.grad(lift(z)))[free],
        lambda z: np.asarray(prior.hess(lift(z)))[np.ix_(free, free)],
        prior.gamma,
    )


def solve_x_star(problem, tol: float = 1e-10) -> StarPoint:
    """Minimise the prior potential over parameters matching the exact data."""
    a = problem.operator.matrix
    x_true = np.asarray(problem.x_true, dtype=float)
    target = a @ x_true
    nonneg = problem.domain == "nonneg"
    if problem.operator.p1 == 0:
        x = x_true.copy()
        active = tuple(np.flatnonzero(x <= 0).tolist()) if nonneg else ()
    else:
        x = _solve_affine(problem.prior, a, target, tol)
        active = ()
        if nonneg and np.any(x < -tol):
            x, active = _solve_orthant(problem.prior, a, target, x, tol)
    resid = float(np.linalg.norm(a @ x - target))
    interior = (not nonneg) or bool(np.all(x > 0))
    return StarPoint(x, resid, interior, active)
