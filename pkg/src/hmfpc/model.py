"""Penalized log-likelihood of the functional-principal-component model.

Each subject contributes ``log N(y_i; X_i beta0, sigma^2 I + F_i F_i')`` with
``F_i = X_i B``.  The covariance is never formed: the matrix-determinant
lemma and the Woodbury identity reduce every subject to a ``K x K``
Cholesky factorisation of ``M_i = sigma^2 I + F_i' F_i``.

Subjects are stored as zero-padded ``(d, n_max, n_B)`` arrays so the whole
objective is one traced function; padded rows of ``X`` and ``y`` are zero
and contribute nothing to ``F_i' F_i``, ``F_i' r_i`` or ``r_i' r_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from scipy.linalg import cho_factor, cho_solve  # noqa: E402

from .basis import OrthoBasis, design_matrix  # noqa: E402
from .data import LongitudinalDataset  # noqa: E402
from .errors import DomainError, NonFiniteObjectiveError  # noqa: E402
from .orthoparam import OrthoCoefs, ParamVector, check_rank, expand_array  # noqa: E402

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class SubjectBlock:
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        if np.ndim(self.X) != 2 or len(self.y) != np.shape(self.X)[0]:
            raise ValueError(f"response has {len(self.y)} values, design has shape {np.shape(self.X)}")

    @property
    def n(self) -> int:
        return len(self.y)


class PenalizedObjective:
    """Data, basis and smoothing parameter defining ``l_p``.

    Parameters
    ----------
    data : LongitudinalDataset
        Observation times must lie inside the basis domain.
    basis : OrthoBasis
    gamma : float
        Smoothing parameter; must be positive (zero is accepted to recover
        the unpenalized likelihood).
    """

    def __init__(self, data: LongitudinalDataset, basis: OrthoBasis, gamma: float = 1.0):
        if not gamma >= 0:
            raise DomainError(f"gamma must be non-negative, got {gamma}")
        self.data = data
        self.basis = basis
        self.gamma = float(gamma)
        self.blocks = [SubjectBlock(np.asarray(y, float), design_matrix(basis, t)) for t, y in zip(data.times, data.values)]
        n_max = max(b.n for b in self.blocks)
        nb = basis.n_basis
        X = np.zeros((len(self.blocks), n_max, nb))
        Y = np.zeros((len(self.blocks), n_max))
        mask = np.zeros((len(self.blocks), n_max))
        for i, b in enumerate(self.blocks):
            X[i, : b.n] = b.X
            Y[i, : b.n] = b.y
            mask[i, : b.n] = 1.0
        self.X, self.Y, self.mask = X, Y, mask
        self._dev = None

    def with_gamma(self, gamma: float) -> "PenalizedObjective":
        """Same data and basis, different smoothing parameter (arrays are shared)."""
        new = object.__new__(PenalizedObjective)
        new.__dict__.update(self.__dict__)
        if not gamma >= 0:
            raise DomainError(f"gamma must be non-negative, got {gamma}")
        new.gamma = float(gamma)
        return new

    @property
    def n_basis(self) -> int:
        return self.basis.n_basis

    @property
    def d(self) -> int:
        return len(self.blocks)

    @property
    def S(self) -> np.ndarray:
        return self.basis.penalty

    @property
    def penalty_root(self) -> np.ndarray:
        """``R`` with ``R' R = S``; ``beta' S beta`` is evaluated as ``||R beta||^2``.

        ``S`` has entries many orders of magnitude above the penalty of a
        smooth curve, so the direct quadratic form cancels badly; the sum of
        squares does not.
        """
        return penalty_root(self.S)

    @property
    def device_arrays(self):
        if self._dev is None:
            self._dev = tuple(jnp.asarray(a) for a in (self.X, self.Y, self.mask, self.penalty_root))
        return self._dev


def penalty_root(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return np.sqrt(np.clip(w, 0.0, None))[:, None] * V.T


# ---------------------------------------------------------------------------
# traced core
# ---------------------------------------------------------------------------


def _terms(theta, X, Y, mask, R, n_basis, K):
    beta0, B, log_sigma, _ = expand_array(theta, n_basis, K, jnp)
    s2 = jnp.exp(2.0 * log_sigma)
    r = (Y - X @ beta0) * mask
    nobs = jnp.sum(mask, axis=1)
    rr = jnp.sum(r * r, axis=1)
    if K == 0:
        logdet = nobs * jnp.log(s2)
        quad = rr / s2
    else:
        F = X @ B
        M = s2 * jnp.eye(K) + jnp.einsum("dnk,dnl->dkl", F, F)
        L = jnp.linalg.cholesky(M)
        Ftr = jnp.einsum("dnk,dn->dk", F, r)
        z = jax.scipy.linalg.solve_triangular(L, Ftr[..., None], lower=True)[..., 0]
        logdet = (nobs - K) * jnp.log(s2) + 2.0 * jnp.sum(jnp.log(jnp.diagonal(L, axis1=1, axis2=2)), axis=1)
        quad = (rr - jnp.sum(z * z, axis=1)) / s2
    ll = -0.5 * (nobs * LOG_2PI + logdet + quad)
    wE = jnp.sum((R @ beta0) ** 2) + jnp.sum((R @ B) ** 2)
    return ll, wE, s2


def _ploglik(theta, X, Y, mask, R, gamma, n_basis, K):
    ll, wE, s2 = _terms(theta, X, Y, mask, R, n_basis, K)
    return jnp.sum(ll) - gamma / (2.0 * s2) * wE


_STATIC = ("n_basis", "K")
_terms_jit = jax.jit(_terms, static_argnames=_STATIC)
_ploglik_jit = jax.jit(_ploglik, static_argnames=_STATIC)
_value_and_grad_jit = jax.jit(jax.value_and_grad(_ploglik), static_argnames=_STATIC)
_grad_jit = jax.jit(jax.grad(_ploglik), static_argnames=_STATIC)


def _check_dims(params: ParamVector, obj: PenalizedObjective) -> None:
    if params.n_basis != obj.n_basis:
        raise ValueError(f"params have n_basis={params.n_basis}, objective has {obj.n_basis}")


def _subject_terms(params: ParamVector, obj: PenalizedObjective):
    _check_dims(params, obj)
    X, Y, mask, R = obj.device_arrays
    ll, wE, s2 = _terms_jit(jnp.asarray(params.to_array()), X, Y, mask, R, n_basis=obj.n_basis, K=params.K)
    ll = np.asarray(ll)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise NonFiniteObjectiveError(f"log-likelihood of subject {bad[0]} is not finite", subject=int(bad[0]))
    return ll, float(wE), float(s2)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


class LowRankCovariance:
    """``sigma^2 I + F F'`` handled through its ``K x K`` capacitance matrix."""

    def __init__(self, sigma2: float, F: np.ndarray):
        self.sigma2 = float(sigma2)
        self.F = np.asarray(F, float)
        if self.F.ndim == 1:
            self.F = self.F[:, None]

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def K(self) -> int:
        return self.F.shape[1]

    @cached_property
    def _chol(self):
        M = self.sigma2 * np.eye(self.K) + self.F.T @ self.F
        return cho_factor(M, lower=True)

    def dense(self) -> np.ndarray:
        return self.sigma2 * np.eye(self.n) + self.F @ self.F.T

    def logdet(self) -> float:
        if self.K == 0:
            return self.n * math.log(self.sigma2)
        L = self._chol[0]
        return (self.n - self.K) * math.log(self.sigma2) + 2.0 * float(np.sum(np.log(np.diag(L))))

    def solve(self, v: np.ndarray) -> np.ndarray:
        """``Sigma^{-1} v`` for a vector or matrix ``v``."""
        v = np.asarray(v, float)
        if self.K == 0:
            return v / self.sigma2
        return (v - self.F @ cho_solve(self._chol, self.F.T @ v)) / self.sigma2


def subject_covariance(sigma2: float, fki) -> LowRankCovariance:
    """Covariance ``sigma^2 I + sum_k f_ki f_ki'`` of one subject's responses.

    ``fki`` is a sequence of ``K`` vectors of length ``n_i`` (or an
    ``n_i x K`` matrix).
    """
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if isinstance(fki, np.ndarray) and fki.ndim == 2:
        F = fki
    else:
        fki = [np.asarray(f, float) for f in fki]
        F = np.stack(fki, axis=1) if fki else None
    if F is None:
        raise ValueError("use subject_covariance_iid for K = 0")
    return LowRankCovariance(sigma2, F)


def subject_covariance_iid(sigma2: float, n: int) -> LowRankCovariance:
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    return LowRankCovariance(sigma2, np.zeros((n, 0)))


def log_likelihood(params: ParamVector, obj: PenalizedObjective) -> float:
    """Unpenalized log-likelihood ``l(theta)``, summed over subjects in order."""
    ll, _, _ = _subject_terms(params, obj)
    return float(np.sum(ll))


def expected_wiggliness(coefs: OrthoCoefs, beta0, S) -> float:
    """``w_E = w(f_0) + sum_k w(f_k)``, each term ``beta' S beta``."""
    R = penalty_root(np.asarray(S, float))
    total = float(np.sum((R @ np.asarray(beta0, float)) ** 2))
    for b in coefs.betas:
        total += float(np.sum((R @ b) ** 2))
    return total


def penalized_log_likelihood(params: ParamVector, obj: PenalizedObjective) -> float:
    """``l(theta) - gamma / (2 sigma^2) * w_E``."""
    ll, wE, s2 = _subject_terms(params, obj)
    return float(np.sum(ll)) - obj.gamma / (2.0 * s2) * wE


def gradient(params: ParamVector, obj: PenalizedObjective) -> np.ndarray:
    """Exact gradient of ``l_p`` with respect to ``theta`` (reverse-mode AD).

    Raises
    ------
    NonDifferentiableError
        If an earlier coefficient vector is numerically zero.
    """
    _check_dims(params, obj)
    check_rank(params)
    X, Y, mask, R = obj.device_arrays
    g = _grad_jit(jnp.asarray(params.to_array()), X, Y, mask, R, obj.gamma, n_basis=obj.n_basis, K=params.K)
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        penalized_log_likelihood(params, obj)  # raises with the subject index if the value is bad
        raise NonFiniteObjectiveError("gradient is not finite")
    return g


def value_and_grad_fn(obj: PenalizedObjective, K: int):
    """Return ``theta -> (l_p, grad l_p)`` on numpy arrays, for the optimizer."""
    X, Y, mask, R = obj.device_arrays
    gamma = obj.gamma
    nb = obj.n_basis

    def fn(theta):
        v, g = _value_and_grad_jit(jnp.asarray(theta), X, Y, mask, R, gamma, n_basis=nb, K=K)
        return float(v), np.asarray(g)

    return fn


def grad_fn(obj: PenalizedObjective, K: int):
    X, Y, mask, R = obj.device_arrays
    gamma = obj.gamma
    nb = obj.n_basis

    def fn(theta):
        return np.asarray(_grad_jit(jnp.asarray(theta), X, Y, mask, R, gamma, n_basis=nb, K=K))

    return fn
