"""
Forward operators and link maps.

A :class:`ForwardOperator` wraps an ``n x p`` matrix together with its
singular value decomposition, computed once at construction. The rank
split separates ``R^p`` into the range of ``A^T`` (dimension ``p0``) and
the null space of ``A`` (dimension ``p1``); the orthogonal matrix ``U``
satisfies ``P_A = U^T diag(I_p0, 0) U``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from glip.errors import DomainError

DEFAULT_RANK_TOL = 1e-10

#: width of the Gaussian bump convolution kernel on [0, 1]
BUMP_WIDTH = 0.05


def _volterra(t, u):
    return (u <= t).astype(float)


def _gaussian_bump(t, u):
    return np.exp(-0.5 * ((t - u) / BUMP_WIDTH) ** 2) / (np.sqrt(2 * np.pi) * BUMP_WIDTH)


KERNELS: dict[str, Callable] = {
    "volterra": _volterra,
    "gaussian_bump": _gaussian_bump,
}


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    matrix: np.ndarray
    provenance: dict = field(default_factory=lambda: {"kind": "dense"})
    rank_tol: float = DEFAULT_RANK_TOL

    def __post_init__(self):
        a = np.atleast_2d(np.array(self.matrix, dtype=float))
        if a.ndim != 2 or not np.all(np.isfinite(a)):
            raise ValueError("operator matrix must be a finite 2-d array")
        a.setflags(write=False)
        object.__setattr__(self, "matrix", a)
        _, sv, vt = np.linalg.svd(a, full_matrices=True)
        object.__setattr__(self, "singular_values", sv)
        object.__setattr__(self, "_vt", vt)
        p0, p1, proj, u = _split(sv, vt, a.shape[1], self.rank_tol)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "projector", proj)
        object.__setattr__(self, "basis", u)
        diag = a.shape[0] == a.shape[1] and np.count_nonzero(a - np.diag(np.diag(a))) == 0
        object.__setattr__(self, "is_diagonal", bool(diag))

    @classmethod
    def dense(cls, matrix, rank_tol: float = DEFAULT_RANK_TOL) -> ForwardOperator:
        return cls(matrix, {"kind": "dense"}, rank_tol)

    @classmethod
    def spectral(cls, alpha: float, p: int, rank_tol: float = DEFAULT_RANK_TOL) -> ForwardOperator:
        """Diagonal operator with singular values ``j^-alpha``, ``j = 1..p``."""
        if alpha <= 0 or p < 1:
            raise ValueError("spectral operator needs alpha > 0 and p >= 1")
        j = np.arange(1, p + 1, dtype=float)
        return cls(np.diag(j**-alpha), {"kind": "spectral", "alpha": float(alpha)}, rank_tol)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    @property
    def norm(self) -> float:
        """Spectral norm."""
        return float(self.singular_values[0]) if self.singular_values.size else 0.0

    @property
    def diagonal(self) -> np.ndarray:
        if not self.is_diagonal:
            raise ValueError("operator is not diagonal")
        return np.diag(self.matrix).copy()

    def to_dict(self) -> dict:
        out = dict(self.provenance)
        if out["kind"] == "dense":
            out["matrix"] = self.matrix.tolist()
        elif out["kind"] == "spectral":
            out["p"] = self.p
        else:
            out.update(n=self.n, p=self.p)
        out["rank_tol"] = self.rank_tol
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ForwardOperator:
        kind = data.get("kind", "dense")
        tol = float(data.get("rank_tol", DEFAULT_RANK_TOL))
        if kind == "dense":
            return cls.dense(data["matrix"], tol)
        if kind == "spectral":
            return cls.spectral(data["alpha"], int(data["p"]), tol)
        if kind == "grid":
            return build_grid(data["kernel"], int(data["n"]), int(data["p"]), tol)
        raise ValueError(f"unknown operator kind {kind!r}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> ForwardOperator:
        return cls.from_dict(json.loads(text))


def _split(sv, vt, p, tol):
    if sv.size == 0 or sv[0] == 0:
        return 0, p, np.zeros((p, p)), vt
    p0 = int(np.count_nonzero(sv > tol * sv[0]))
    rows = vt[:p0]
    proj = rows.T @ rows
    proj = 0.5 * (proj + proj.T)
    return p0, p - p0, proj, vt


def apply(op: ForwardOperator, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.p:
        raise ValueError(f"x has length {x.shape[-1]}, operator expects {op.p}")
    return x @ op.matrix.T if x.ndim > 1 else op.matrix @ x


def rank_split(op: ForwardOperator, tol: float | None = None):
    """Return ``(p0, p1, P_A, U)`` for the given relative rank tolerance."""
    if tol is None:
        return op.p0, op.p1, op.projector, op.basis
    if tol <= 0:
        raise ValueError("tol must be positive")
    return _split(op.singular_values, op._vt, op.p, tol)


def build_grid(kernel: str, n: int, p: int, rank_tol: float = DEFAULT_RANK_TOL) -> ForwardOperator:
    """Discretize an integral operator on the grids ``t_i = i/n``, ``u_j = j/p``.

    The quadrature weight ``1/p`` is folded into the matrix.
    """
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    if n < 1 or p < 1:
        raise ValueError("grid sizes must be >= 1")
    t = np.arange(1, n + 1)[:, None] / n
    u = np.arange(1, p + 1)[None, :] / p
    mat = KERNELS[kernel](t, u) / p
    return ForwardOperator(mat, {"kind": "grid", "kernel": kernel}, rank_tol)


@dataclass(frozen=True)
class LinkMap:
    """A componentwise invertible link ``G`` with derivatives.

    ``domain`` is an elementwise predicate on the argument of ``G``.
    """

    name: str = "identity"
    forward: Callable | None = None
    inverse: Callable | None = None
    derivative: Callable | None = None
    second: Callable | None = None
    domain: Callable | None = None

    @classmethod
    def identity(cls) -> LinkMap:
        return cls()

    @classmethod
    def exp(cls) -> LinkMap:
        return cls("exp", np.exp, np.log, np.exp, np.exp, None)

    @property
    def is_identity(self) -> bool:
        return self.forward is None

    def check(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if self.domain is not None and not np.all(self.domain(mu)):
            raise DomainError(f"argument outside the domain of the {self.name} link")
        return mu

    def to_dict(self) -> dict:
        if self.name not in ("identity", "exp"):
            raise ValueError("only built-in links are serializable")
        return {"kind": self.name}

    @classmethod
    def from_dict(cls, data: dict) -> LinkMap:
        kind = data.get("kind", "identity")
        if kind == "identity":
            return cls.identity()
        if kind == "exp":
            return cls.exp()
        raise ValueError(f"unknown link {kind!r}")


def link_apply(link: LinkMap, mu) -> np.ndarray:
    mu = link.check(mu)
    return mu.copy() if link.is_identity else link.forward(mu)


def link_derivative(link: LinkMap, mu) -> np.ndarray:
    """Elementwise ``G'(mu)``."""
    mu = link.check(mu)
    return np.ones_like(mu) if link.is_identity else link.derivative(mu)


def link_second(link: LinkMap, mu) -> np.ndarray:
    mu = link.check(mu)
    if link.is_identity:
        return np.zeros_like(mu)
    if link.second is None:
        raise ValueError(f"the {link.name} link has no second derivative")
    return link.second(mu)


def link_jacobian(link: LinkMap, mu) -> np.ndarray:
    """Diagonal Jacobian ``diag(G'(mu))``."""
    return np.diag(link_derivative(link, mu))
