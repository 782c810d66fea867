"""Maximum penalized likelihood fits, random-effect scores and trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .basis import OrthoBasis, eval_basis
from .errors import IntegrityError, NonFiniteObjectiveError
from .model import PenalizedObjective, value_and_grad_fn, grad_fn
from .optim import GTOL, MAX_ITER, minimize_bfgs
from .orthoparam import (
    OrthoCoefs,
    ParamVector,
    alphas_from_betas,
    expand,
    normalize_fit,
    param_dim,
)

FORMAT_VERSION = 1
INIT_SCALE = 0.01
N_RESTARTS = 5
SWAP_RATIO = 10.0
HESS_STEP = 1e-5
COLLAPSE_RTOL = 1e-16


@dataclass
class FittedModel:
    """A converged (or best-effort) fit at fixed ``(K, gamma)``.

    ``params`` are the normalized coordinates: components sorted by
    decreasing ``lambda_k = ||beta_k||^2`` with ``int f_k >= 0``.  The
    Hessian and scores refer to this normalized parameterisation.
    """

    basis: OrthoBasis
    params: ParamVector
    coefs: OrthoCoefs
    gamma: float
    scores: np.ndarray
    hessian: np.ndarray
    loglik_pen: float
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    seed: int = 0
    data_fingerprint: str = ""

    @property
    def K(self) -> int:
        return self.params.K

    @property
    def sigma2_hat(self) -> float:
        return self.params.sigma2

    @property
    def lambdas(self) -> np.ndarray:
        return self.coefs.lambdas

    @property
    def beta0(self) -> np.ndarray:
        return self.params.beta0

    @property
    def d(self) -> int:
        return self.scores.shape[0]

    def to_dict(self) -> dict:
        return {
            "format": "hmfpc-model",
            "version": FORMAT_VERSION,
            "basis": self.basis.to_dict(),
            "basis_hash": self.basis.fingerprint(),
            "data_hash": self.data_fingerprint,
            "K": self.K,
            "gamma": self.gamma,
            "sigma2_hat": self.sigma2_hat,
            "theta": self.params.to_array().tolist(),
            "betas": [b.tolist() for b in self.coefs.betas],
            "n_subjects": self.d,
            "scores": self.scores.tolist(),
            "hessian": self.hessian.tolist(),
            "loglik_pen": self.loglik_pen,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips float64 exactly
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedModel":
        if doc.get("format") != "hmfpc-model":
            raise IntegrityError("not a model document")
        if doc.get("version") != FORMAT_VERSION:
            raise IntegrityError(f"unsupported model version {doc.get('version')!r}")
        basis = OrthoBasis.from_dict(doc["basis"])
        if basis.fingerprint() != doc["basis_hash"]:
            raise IntegrityError("basis hash does not match the stored basis")
        K = int(doc["K"])
        params = ParamVector.from_array(np.asarray(doc["theta"], float), basis.n_basis, K)
        coefs = expand(params, basis.penalty)
        coefs.betas = [np.asarray(b, float) for b in doc["betas"]]
        scores = np.asarray(doc["scores"], float).reshape(int(doc["n_subjects"]), K)
        p = param_dim(basis.n_basis, K)
        hessian = np.asarray(doc["hessian"], float).reshape(p, p)
        return cls(
            basis, params, coefs, float(doc["gamma"]), scores, hessian, float(doc["loglik_pen"]),
            bool(doc["converged"]), dict(doc.get("diagnostics", {})), int(doc.get("seed", 0)),
            doc.get("data_hash", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------


def initial_k0(obj: PenalizedObjective) -> ParamVector:
    """Penalized least squares on the stacked data; this is the exact K=0 optimum."""
    X = np.concatenate([b.X for b in obj.blocks])
    y = np.concatenate([b.y for b in obj.blocks])
    A = X.T @ X + obj.gamma * obj.S
    beta0 = np.linalg.solve(A, X.T @ y)
    rss = float(np.sum((y - X @ beta0) ** 2))
    s2 = (rss + obj.gamma * float(beta0 @ obj.S @ beta0)) / len(y)
    s2 = max(s2, 1e-300)
    return ParamVector(beta0, [], 0.5 * math.log(s2))


def hessian_fd(obj: PenalizedObjective, theta: np.ndarray, K: int) -> np.ndarray:
    """Central differences of the exact gradient, symmetrized."""
    g = grad_fn(obj, K)
    p = len(theta)
    H = np.empty((p, p))
    for j in range(p):
        h = HESS_STEP * (1.0 + abs(theta[j]))
        e = np.zeros(p)
        e[j] = h
        H[:, j] = (g(theta + e) - g(theta - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def _inv_curvature(H: np.ndarray) -> np.ndarray:
    """Positive-definite inverse of ``-H`` with eigenvalues floored in magnitude.

    The penalty makes ``l_p`` very stiff along rough directions (curvature
    up to ``gamma * max(S) / sigma^2``), so BFGS needs this scaling from the
    start rather than learning it one rank at a time.
    """
    w, V = np.linalg.eigh(-H)
    w = np.abs(w)
    w = np.maximum(w, 1e-10 * max(w.max(initial=0.0), 1e-300))
    return (V / w) @ V.T


def _run(obj: PenalizedObjective, K: int, theta0: np.ndarray):
    fg = value_and_grad_fn(obj, K)

    def neg(theta):
        f, g = fg(theta)
        return -f, -g

    def inv_hess0(theta):
        H = hessian_fd(obj, theta, K)
        if not np.all(np.isfinite(H)):
            return None
        return _inv_curvature(H)

    return minimize_bfgs(neg, theta0, gtol=GTOL, max_iter=MAX_ITER, inv_hess0=inv_hess0)


def _newton_polish(obj, K, theta, H, steps=3):
    """A few Newton steps from a BFGS optimum; each is kept only if it helps."""
    fg = value_and_grad_fn(obj, K)
    f, g = fg(theta)
    for _ in range(steps):
        try:
            L = np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            break
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        f_new, g_new = fg(theta + step)
        if not (np.isfinite(f_new) and f_new >= f - 1e-12 * max(1.0, abs(f))):
            break
        if np.max(np.abs(g_new)) >= np.max(np.abs(g)):
            break
        theta, f, g = theta + step, f_new, g_new
        H = hessian_fd(obj, theta, K)
    return theta, H


def _new_component(prev: ParamVector, K: int, rng, scale: float) -> ParamVector:
    nb = prev.n_basis
    alphas = list(prev.alphas[: K - 1])
    alphas.append(rng.normal(0.0, scale, nb - K + 1))
    return ParamVector(prev.beta0, alphas, prev.log_sigma)


def _swapped(theta: np.ndarray, nb: int, K: int) -> bool:
    if K < 2:
        return False
    lam = expand(ParamVector.from_array(theta, nb, K)).lambdas
    return lam[-1] > SWAP_RATIO * lam[-2]


def _finish(obj, K, theta, res_info, seed) -> FittedModel:
    nb = obj.n_basis
    raw = ParamVector.from_array(theta, nb, K)
    coefs, order, signs = normalize_fit(expand(raw), obj.basis.integrals)
    norm = ParamVector(raw.beta0, alphas_from_betas(coefs.betas, nb), raw.log_sigma)
    coefs = expand(norm, obj.S)
    theta_n = norm.to_array()
    H = hessian_fd(obj, theta_n, K)
    theta_n, H = _newton_polish(obj, K, theta_n, H)
    norm = ParamVector.from_array(theta_n, nb, K)
    coefs = expand(norm, obj.S)
    fg = value_and_grad_fn(obj, K)
    f, g = fg(theta_n)
    model = FittedModel(
        basis=obj.basis,
        params=norm,
        coefs=coefs,
        gamma=obj.gamma,
        scores=np.zeros((obj.d, K)),
        hessian=H,
        loglik_pen=float(f),
        converged=bool(res_info["converged"]),
        diagnostics={
            **res_info,
            "grad_inf_norm": float(np.max(np.abs(g), initial=0.0)),
            "component_order": [int(i) for i in order],
            "component_signs": [float(s) for s in signs],
        },
        seed=int(seed),
        data_fingerprint=obj.data.fingerprint(),
    )
    model.scores = estimate_scores(model, obj)
    return model


def maximize(obj: PenalizedObjective, K: int, init: ParamVector | None = None, seed: int = 0) -> FittedModel:
    """Maximize ``l_p`` at fixed ``K`` and ``gamma`` by BFGS.

    Parameters
    ----------
    obj : PenalizedObjective
    K : int
        Number of components.
    init : ParamVector, optional
        Starting point of dimension ``(n_basis, K)``. Without one, ``K = 0``
        starts from penalized least squares and ``K > 0`` runs the warm-start
        chain ``0, 1, ..., K``.
    seed : int
        Seeds the new-component initialisation and restarts.

    Returns
    -------
    FittedModel
        ``converged`` is False when BFGS failed even after restarts; the
        best parameters found are still returned.
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    if init is None:
        if K == 0:
            init = initial_k0(obj)
        else:
            return fit_sequence(obj, K, seed=seed)[-1]
    if init.n_basis != obj.n_basis or init.K != K:
        raise ValueError(f"init has (n_basis, K) = ({init.n_basis}, {init.K}), expected ({obj.n_basis}, {K})")
    return _maximize_from(obj, K, init, seed, prev=None)


def _maximize_from(obj, K, init, seed, prev):
    nb = obj.n_basis
    res = _run(obj, K, init.to_array())
    attempts = [res]
    n_restart = 0
    if K > 0 and (not res.converged or _swapped(res.x, nb, K)):
        base = prev if prev is not None else init
        scale = max(INIT_SCALE, 0.3 * math.sqrt(base.sigma2))
        for r in range(1, N_RESTARTS + 1):
            start = _new_component(base, K, _rng.stream(seed, K, r), scale)
            try:
                attempts.append(_run(obj, K, start.to_array()))
            except NonFiniteObjectiveError:
                continue
            n_restart += 1
    # prefer converged, unswapped fits, then the best objective
    best = min(attempts, key=lambda r: (not r.converged, _swapped(r.x, nb, K), r.fun))
    info = {
        "converged": bool(best.converged),
        "iterations": int(best.n_iter),
        "evaluations": int(best.n_eval),
        "message": best.message,
        "restarts": n_restart,
    }
    return _finish(obj, K, best.x, info, seed)


def fit_sequence(obj: PenalizedObjective, K_max: int, seed: int = 0, start: list | None = None) -> list:
    """Fit ``K = 0 .. K_max``, each warm-started from its predecessor.

    The new ``alpha_K`` starts at ``N(0, 0.01^2 I)`` from a stream keyed by
    ``(seed, K)``.  If the predecessor's last component has collapsed to
    zero (``lambda < 1e-16 lambda_1``) the new one starts at exactly zero,
    which is then a stationary point: a component the data could not use at
    ``K - 1`` is not usable at ``K`` either.  Fits already available in
    ``start`` are reused.  The sequence stops after the first non-converged
    fit.
    """
    fits = list(start or [])
    if not fits:
        fits.append(maximize(obj, 0, initial_k0(obj), seed=seed))
    while len(fits) <= K_max and fits[-1].converged:
        K = len(fits)
        prev = fits[-1].params
        lam = fits[-1].lambdas
        if K > 1 and lam[-1] < COLLAPSE_RTOL * lam[0]:
            init = _new_component(prev, K, _rng.stream(seed, K, 0), 0.0)
        else:
            init = _new_component(prev, K, _rng.stream(seed, K, 0), INIT_SCALE)
        fits.append(_maximize_from(obj, K, init, seed, prev=prev))
    return fits[: K_max + 1]


# ---------------------------------------------------------------------------


def _score_terms(params: ParamVector, coefs: OrthoCoefs, obj: PenalizedObjective):
    """Per-subject ``(u_hat, M)`` with ``M = sigma^2 I + F'F``, vectorized over padding."""
    K = params.K
    r = (obj.Y - obj.X @ params.beta0) * obj.mask
    if K == 0:
        return np.zeros((obj.d, 0)), np.zeros((obj.d, 0, 0))
    F = obj.X @ coefs.matrix()
    M = params.sigma2 * np.eye(K) + np.einsum("dnk,dnl->dkl", F, F)
    Ftr = np.einsum("dnk,dn->dk", F, r)
    u = np.linalg.solve(M, Ftr[..., None])[..., 0]
    return u, M


def estimate_scores(model: FittedModel, obj: PenalizedObjective) -> np.ndarray:
    """Conditional means ``u_i = F_i' Sigma_i^{-1} (y_i - X_i beta0)``, shape ``(d, K)``.

    Computed as ``M_i^{-1} F_i' r_i``, which is the same vector by the
    push-through identity.
    """
    return _score_terms(model.params, model.coefs, obj)[0]


def score_posterior(params: ParamVector, coefs: OrthoCoefs, obj: PenalizedObjective):
    """Conditional law of ``u_i | y_i``: means ``(d, K)`` and covariances ``(d, K, K)``.

    The covariance ``I - F' Sigma^{-1} F`` equals ``sigma^2 M^{-1}``.
    """
    u, M = _score_terms(params, coefs, obj)
    if params.K == 0:
        return u, M
    cov = params.sigma2 * np.linalg.inv(M)
    return u, 0.5 * (cov + np.swapaxes(cov, 1, 2))


def predict_trajectory(model: FittedModel, subject: int, times, deriv: int = 0, extrapolate: bool = False) -> np.ndarray:
    """``mu_i(t) = f_0(t) + sum_k u_ik f_k(t)`` (or its first derivative)."""
    if not 0 <= subject < model.d:
        raise IndexError(f"unknown subject index {subject}; model has {model.d} subjects")
    return eval_basis(model.basis, times, deriv, extrapolate) @ subject_coefficients(model)[subject]


def subject_coefficients(model: FittedModel, scores: np.ndarray | None = None) -> np.ndarray:
    """``delta_i = beta0 + B u_i`` for every subject, shape ``(d, n_basis)``."""
    scores = model.scores if scores is None else scores
    if model.K == 0:
        return np.tile(model.beta0, (scores.shape[0], 1))
    return model.beta0[None, :] + scores @ model.coefs.matrix().T


def component_functions(model: FittedModel, times, deriv: int = 0, extrapolate: bool = False):
    """``f_0`` and ``f_1..f_K`` evaluated at ``times``: arrays ``(N,)`` and ``(N, K)``."""
    Bt = eval_basis(model.basis, times, deriv, extrapolate)
    F = Bt @ model.coefs.matrix() if model.K else np.zeros((len(Bt), 0))
    return Bt @ model.beta0, F
