"""Orthonormal cubic-spline basis with an exact second-derivative penalty.

Raw cubic B-splines are built on knots placed at quantiles of the pooled
observation times, then orthonormalised in the ``L2[t_lo, t_hi]`` inner
product.  Every inner product here is a Gauss-Legendre sum with seven
nodes per knot interval, which is exact for piecewise polynomials of degree
up to 13 and therefore for all products of two cubics.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import DegenerateDesignError, DomainError, EmptySubjectError

DEGREE = 3
DEFAULT_N_BASIS = 10
GAUSS_NODES = 7
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class OrthoBasis:
    """Orthonormal cubic spline basis ``b_1 ... b_nB`` on ``[t_lo, t_hi]``.

    Attributes
    ----------
    n_basis : int
    knots : ndarray
        Strictly increasing breakpoints, boundary knots included.
    transform_matrix : ndarray, shape (n_basis, n_basis)
        ``A`` such that ``b(t) = A.T @ B(t)`` for the raw B-splines ``B``.
    penalty : ndarray, shape (n_basis, n_basis)
        ``S`` with ``w(beta' b) = beta' S beta``.
    integrals : ndarray, shape (n_basis,)
        ``int b_l(t) dt`` over the domain.
    """

    n_basis: int
    knots: np.ndarray
    transform_matrix: np.ndarray
    penalty: np.ndarray
    integrals: np.ndarray

    def __post_init__(self):
        for name in ("knots", "transform_matrix", "penalty", "integrals"):
            getattr(self, name).setflags(write=False)
        full = np.r_[[self.knots[0]] * DEGREE, self.knots, [self.knots[-1]] * DEGREE]
        object.__setattr__(self, "_raw", BSpline(full, np.eye(self.n_basis), DEGREE, extrapolate=False))

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n_basis).tobytes())
        h.update(np.ascontiguousarray(self.knots, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.transform_matrix, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "n_basis": self.n_basis,
            "knots": self.knots.tolist(),
            "transform_matrix": self.transform_matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrthoBasis":
        return _assemble(np.asarray(d["knots"], float), np.asarray(d["transform_matrix"], float))

    def raw(self, t, deriv=0) -> np.ndarray:
        """Raw B-spline values (or derivatives) at in-domain points."""
        t = np.atleast_1d(np.asarray(t, float))
        lo, hi = self.domain
        t = np.clip(t, lo, hi)
        spl = self._raw if deriv == 0 else self._raw.derivative(deriv)
        out = spl(t)
        # scipy leaves the right endpoint to the last open interval; it is finite
        return np.nan_to_num(out, nan=0.0)


def _gauss_nodes(knots: np.ndarray):
    x, w = np.polynomial.legendre.leggauss(GAUSS_NODES)
    a, b = knots[:-1, None], knots[1:, None]
    nodes = 0.5 * (b - a) * x[None, :] + 0.5 * (b + a)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def quadrature(basis: OrthoBasis):
    """Gauss-Legendre nodes and weights over the basis domain (7 per knot interval)."""
    return _gauss_nodes(basis.knots)


def _orthonormalize(G: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt of the unit vectors in the ``G`` inner product.

    Returns upper-triangular ``A`` with ``A.T @ G @ A = I``.  Each column is
    orthogonalised twice against its predecessors.
    """
    n = G.shape[0]
    A = np.eye(n)
    for j in range(n):
        v = A[:, j].copy()
        for _ in range(2):
            for i in range(j):
                q = A[:, i]
                v -= (q @ G @ v) * q
        nrm = np.sqrt(v @ G @ v)
        if not nrm > 0:
            raise DegenerateDesignError("raw B-spline Gram matrix is singular")
        A[:, j] = v / nrm
    return A


def _assemble(knots: np.ndarray, A: np.ndarray | None = None) -> OrthoBasis:
    n_basis = len(knots) + DEGREE - 1
    full = np.r_[[knots[0]] * DEGREE, knots, [knots[-1]] * DEGREE]
    raw = BSpline(full, np.eye(n_basis), DEGREE, extrapolate=False)
    nodes, weights = _gauss_nodes(knots)
    B0 = np.nan_to_num(raw(nodes))
    B2 = np.nan_to_num(raw.derivative(2)(nodes))
    G = (B0 * weights[:, None]).T @ B0
    S_raw = (B2 * weights[:, None]).T @ B2
    if A is None:
        A = _orthonormalize(G)
    S = A.T @ S_raw @ A
    S = 0.5 * (S + S.T)
    integrals = A.T @ (weights @ B0)
    return OrthoBasis(n_basis, knots.copy(), A.copy(), S, integrals)


def build_basis(times, n_basis: int = DEFAULT_N_BASIS) -> OrthoBasis:
    """Build an orthonormal cubic spline basis for the pooled ``times``.

    ``n_basis - 4`` interior knots sit at equally spaced quantiles of the
    pooled times; the boundary knots are their minimum and maximum.

    Raises
    ------
    DegenerateDesignError
        If there are fewer than ``n_basis`` distinct times, or the quantile
        knots are not strictly increasing.
    """
    if n_basis < DEGREE + 1:
        raise ValueError(f"n_basis must be at least {DEGREE + 1}, got {n_basis}")
    times = np.asarray(times, float).ravel()
    distinct = np.unique(times)
    if len(distinct) < n_basis:
        raise DegenerateDesignError(
            f"{len(distinct)} distinct time values; at least n_basis={n_basis} are required"
        )
    n_interior = n_basis - DEGREE - 1
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = np.quantile(times, probs)
    knots = np.r_[distinct[0], interior, distinct[-1]]
    if np.any(np.diff(knots) <= 0):
        # heavy ties in the pooled times; fall back to quantiles of distinct values
        knots = np.r_[distinct[0], np.quantile(distinct, probs), distinct[-1]]
        if np.any(np.diff(knots) <= 0):
            raise DegenerateDesignError("cannot place strictly increasing knots")
    return _assemble(knots)


def eval_basis(basis: OrthoBasis, t, deriv: int = 0, extrapolate: bool = False) -> np.ndarray:
    """Evaluate ``b(t)``, ``b'(t)`` or ``b''(t)``.

    Parameters
    ----------
    t : float or array_like
        Evaluation points. A scalar returns shape ``(n_basis,)``; an array
        returns ``(len(t), n_basis)``.
    deriv : {0, 1, 2}
    extrapolate : bool
        Outside the domain each basis function continues linearly (value and
        slope continuous, zero curvature). When False such points raise.
    """
    if deriv not in (0, 1, 2):
        raise ValueError("deriv must be 0, 1 or 2")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, float))
    lo, hi = basis.domain
    slack = _DOMAIN_SLACK * max(1.0, hi - lo)
    below, above = t < lo - slack, t > hi + slack
    if (below.any() or above.any()) and not extrapolate:
        bad = t[below | above][0]
        raise DomainError(f"t={bad!r} outside basis domain [{lo}, {hi}]")
    A = basis.transform_matrix
    out = rowdot(basis.raw(t, deriv), A)
    if below.any() or above.any():
        for mask, edge in ((below, lo), (above, hi)):
            if not mask.any():
                continue
            if deriv == 2:
                out[mask] = 0.0
                continue
            slope = rowdot(basis.raw(edge, 1), A)
            if deriv == 1:
                out[mask] = slope
            else:
                out[mask] = rowdot(basis.raw(edge, 0), A) + (t[mask] - edge)[:, None] * slope
    return out[0] if scalar else out


def rowdot(M: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``M @ A`` computed row by row, so each row's result does not depend on
    how many other rows are evaluated alongside it (BLAS kernels may)."""
    return np.sum(M[:, :, None] * A[None, :, :], axis=1)


def design_matrix(basis: OrthoBasis, subject_times) -> np.ndarray:
    """Design matrix ``X`` with row ``j`` equal to ``b(t_ij)``."""
    subject_times = np.atleast_1d(np.asarray(subject_times, float))
    if subject_times.size == 0:
        raise EmptySubjectError("subject has no observation times")
    return eval_basis(basis, subject_times, 0)


def gram_matrix(basis: OrthoBasis, deriv: int = 0) -> np.ndarray:
    """``int b^(deriv)(t) b^(deriv)(t)' dt`` by quadrature."""
    nodes, weights = quadrature(basis)
    Bd = eval_basis(basis, nodes, deriv)
    return (Bd * weights[:, None]).T @ Bd


def project(basis: OrthoBasis, f) -> tuple[np.ndarray, float]:
    """L2 projection of the callable ``f`` onto the basis.

    Returns the coefficients and the RMS residual at the quadrature nodes.
    """
    nodes, weights = quadrature(basis)
    Bn = eval_basis(basis, nodes)
    fn = np.asarray(f(nodes), float)
    beta = Bn.T @ (weights * fn)
    resid = fn - Bn @ beta
    return beta, float(np.sqrt(np.sum(weights * resid**2) / np.sum(weights)))
