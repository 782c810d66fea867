"""Unconstrained parameterisation of mutually orthogonal coefficient vectors.

``beta_1 = alpha_1`` and, for ``k > 1``, ``beta_k = T_{k-1} alpha_k``, where
the columns of ``T_{k-1}`` are the trailing ``n_B - k + 1`` columns of the
full Q factor of ``B_{k-1} = (beta_1 ... beta_{k-1})``.

Q is built from Householder reflections that map each working column onto
``+||x|| e_1``, so R has a non-negative diagonal and ``T`` is a fixed smooth
function of the preceding coefficient vectors.  The reflection vector uses
Parlett's cancellation-free form of ``x_1 - ||x||``.  The same code runs on
numpy and jax.numpy arrays so the fitting gradient differentiates exactly
what is evaluated here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonDifferentiableError

RANK_TOL = 1e-12


@dataclass
class ParamVector:
    """Optimizer coordinates ``theta = (beta0, alpha_1..alpha_K, log_sigma)``."""

    beta0: np.ndarray
    alphas: list
    log_sigma: float

    @property
    def n_basis(self) -> int:
        return len(self.beta0)

    @property
    def K(self) -> int:
        return len(self.alphas)

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, float)
        self.alphas = [np.asarray(a, float) for a in self.alphas]
        self.log_sigma = float(self.log_sigma)
        n = len(self.beta0)
        for k, a in enumerate(self.alphas, start=1):
            if a.shape != (n - k + 1,):
                raise ValueError(f"alpha_{k} must have length {n - k + 1}, got {a.shape}")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.beta0, *self.alphas, [self.log_sigma]])

    @classmethod
    def from_array(cls, theta, n_basis: int, K: int | None = None) -> "ParamVector":
        theta = np.asarray(theta, float)
        if K is None:
            K = infer_K(len(theta), n_basis)
        if len(theta) != param_dim(n_basis, K):
            raise ValueError(f"theta has length {len(theta)}, expected {param_dim(n_basis, K)}")
        pos = n_basis
        alphas = []
        for k in range(1, K + 1):
            m = n_basis - k + 1
            alphas.append(theta[pos : pos + m])
            pos += m
        return cls(theta[:n_basis].copy(), [a.copy() for a in alphas], float(theta[pos]))

    @property
    def sigma2(self) -> float:
        return float(np.exp(2.0 * self.log_sigma))


def param_dim(n_basis: int, K: int) -> int:
    return n_basis + sum(n_basis - k + 1 for k in range(1, K + 1)) + 1


def infer_K(p: int, n_basis: int) -> int:
    for K in range(n_basis + 1):
        if param_dim(n_basis, K) == p:
            return K
        if param_dim(n_basis, K) > p:
            break
    raise ValueError(f"no K gives parameter dimension {p} with n_basis={n_basis}")


@dataclass
class OrthoCoefs:
    """Orthogonal coefficient vectors with their null-space bases.

    ``t_matrices[k-1]`` is ``T_{k-1}`` and ``s_matrices[k-1]`` is
    ``S_k = T_{k-1}' S T_{k-1}``; ``T_0`` is the identity.
    """

    betas: list
    t_matrices: list = field(default_factory=list)
    s_matrices: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.betas)

    def matrix(self, n_basis: int | None = None) -> np.ndarray:
        """``B_K`` with the coefficient vectors as columns."""
        if not self.betas:
            return np.zeros((n_basis or 0, 0))
        return np.stack(self.betas, axis=1)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([float(b @ b) for b in self.betas])


def _xp_of(x):
    if isinstance(x, np.ndarray) or np.isscalar(x):
        return np
    import jax.numpy as jnp

    return jnp


def _reflectors(B, xp):
    """Householder vectors (zero-padded to full length) for the columns of ``B``."""
    n, m = B.shape
    A = B
    vs = []
    for j in range(m):
        x = A[j:, j]
        tail = xp.sum(x[1:] ** 2)
        nx = xp.sqrt(x[0] ** 2 + tail)
        pos = x[0] > 0
        den = xp.where(pos, x[0] + nx, 1.0)
        v0 = xp.where(pos, -tail / den, x[0] - nx)
        v = xp.concatenate([xp.zeros(j), xp.reshape(v0, (1,)), x[1:]])
        vv = xp.sum(v**2)
        # rank-deficient column (or one already on +e_1): identity reflector
        live = (nx > RANK_TOL) & (vv > 0)
        scale = xp.where(live, 2.0 / xp.where(live, vv, 1.0), 0.0)
        vs.append((v, scale))
        A = A - scale * xp.outer(v, v @ A)
    return vs


def null_space(B, xp=None):
    """Trailing ``n - m`` columns of the Householder Q factor of ``B`` (n x m)."""
    xp = xp or _xp_of(B)
    n, m = B.shape
    Y = xp.eye(n)[:, m:]
    for v, scale in reversed(_reflectors(B, xp)):
        Y = Y - scale * xp.outer(v, v @ Y)
    return Y


def expand_array(theta, n_basis: int, K: int, xp=None):
    """Array-level transform: ``theta -> (beta0, B, log_sigma, [T_0..T_{K-1}])``.

    ``B`` is ``n_basis x K``. Works for numpy and jax.numpy inputs.
    """
    xp = xp or _xp_of(theta)
    beta0 = theta[:n_basis]
    pos = n_basis
    betas, ts = [], []
    for k in range(1, K + 1):
        m = n_basis - k + 1
        alpha = theta[pos : pos + m]
        pos += m
        if k == 1:
            T = xp.eye(n_basis)
        else:
            T = null_space(xp.stack(betas, axis=1), xp)
        ts.append(T)
        betas.append(T @ alpha)
    B = xp.stack(betas, axis=1) if betas else xp.zeros((n_basis, 0))
    return beta0, B, theta[pos], ts


def expand(params: ParamVector, S: np.ndarray | None = None) -> OrthoCoefs:
    """Map ``alpha_1..alpha_K`` to orthogonal ``beta_1..beta_K``.

    When the penalty ``S`` is supplied the projected penalties ``S_k`` are
    filled in as well.
    """
    theta = params.to_array()
    _, B, _, ts = expand_array(theta, params.n_basis, params.K, np)
    betas = [B[:, k].copy() for k in range(params.K)]
    s_mats = [T.T @ S @ T for T in ts] if S is not None else []
    return OrthoCoefs(betas, ts, s_mats)


def check_rank(params: ParamVector) -> None:
    """Raise if an earlier coefficient vector is numerically zero.

    The transform is not differentiable there: the Q factor's null space
    changes dimension.
    """
    coefs = expand(params)
    for k, b in enumerate(coefs.betas[:-1], start=1):
        if np.linalg.norm(b) < RANK_TOL:
            raise NonDifferentiableError(f"beta_{k} has norm below {RANK_TOL}; B_{k} is rank deficient")


def alphas_from_betas(betas, n_basis: int) -> list:
    """Inverse of :func:`expand` for an orthogonal set: ``alpha_k = T_{k-1}' beta_k``."""
    alphas = []
    for k, b in enumerate(betas, start=1):
        if k == 1:
            alphas.append(np.asarray(b, float).copy())
        else:
            T = null_space(np.stack(betas[: k - 1], axis=1), np)
            alphas.append(T.T @ b)
    return alphas


def normalize_fit(coefs: OrthoCoefs, integrals: np.ndarray, S: np.ndarray | None = None):
    """Reorder components by decreasing norm and fix their signs.

    Each ``beta_k`` is flipped when ``int f_k(t) dt = beta_k' c < 0``, where
    ``c`` holds the basis integrals. Returns ``(coefs, order, signs)``, the
    new coefficients being ``signs[k] * betas[order[k]]``; the T and S
    matrices are recomputed for the new ordering.
    """
    norms = np.array([np.linalg.norm(b) for b in coefs.betas])
    # stable sort: equal norms keep their original order
    order = np.argsort(-norms, kind="stable")
    betas, signs = [], []
    for k in order:
        b = coefs.betas[k]
        s = -1.0 if float(b @ integrals) < 0 else 1.0
        signs.append(s)
        betas.append(s * b)
    n = len(integrals)
    ts = [np.eye(n)] + [null_space(np.stack(betas[:k], axis=1), np) for k in range(1, len(betas))]
    s_mats = [T.T @ S @ T for T in ts] if S is not None else []
    return OrthoCoefs(betas, ts[: len(betas)], s_mats), order, np.array(signs)
