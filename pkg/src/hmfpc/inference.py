"""Parametric-bootstrap pointwise bands for subject trajectories.

Each draw samples ``theta ~ N(theta_hat, -H^{-1})``, maps it to orthogonal
coefficients, samples every subject's scores from their conditional law
given the data under that ``theta``, and stores the subject coefficient
vectors ``delta_i = beta0 + B u_i``.  Bands are pointwise quantiles of
``delta_i . b(t)`` over draws.  ``K`` and ``gamma`` stay fixed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import _rng
from .basis import OrthoBasis, eval_basis
from .data import format_float
from .errors import IndefiniteHessianError
from .fit import FittedModel, score_posterior
from .model import PenalizedObjective
from .orthoparam import ParamVector, expand

DEFAULT_N_S = 1000
DEFAULT_LEVEL = 0.95
MIN_TAIL_DRAWS = 5
BAND_COLUMNS = ("subject", "time", "estimate", "lower", "upper", "level", "deriv")


@dataclass
class BootstrapSample:
    """``deltas[j, i]`` is subject ``i``'s coefficient vector in draw ``j``."""

    deltas: np.ndarray
    seed: int
    n_s: int
    thetas: np.ndarray | None = None


@dataclass
class ConfidenceBand:
    times: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    deriv: int
    estimate: np.ndarray | None = None
    warning: str | None = None


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    """Factor ``R`` with ``R R' = C`` after symmetrising and clamping eigenvalues at 0."""
    w, V = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def covariance_factor(H: np.ndarray) -> np.ndarray:
    """Cholesky factor of ``V = -H^{-1}``.

    ``V`` gets diagonal jitter ``eps * trace(V) / p`` with ``eps`` raised from
    1e-10 to 1e-6 until the factorisation succeeds.
    """
    A = -0.5 * (H + H.T)
    try:
        La = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise IndefiniteHessianError(
            "Hessian is not negative definite; refit from a better start or choose another gamma"
        ) from None
    Linv = np.linalg.solve(La, np.eye(len(A)))
    V = Linv.T @ Linv
    V = 0.5 * (V + V.T)
    scale = np.trace(V) / len(V)
    for eps in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return np.linalg.cholesky(V + eps * scale * np.eye(len(V)))
        except np.linalg.LinAlgError:
            continue
    raise IndefiniteHessianError("covariance of the estimates is not positive definite after jitter 1e-6")


def _draw(model: FittedModel, obj: PenalizedObjective, L: np.ndarray, seed: int, j: int):
    rng = _rng.stream(seed, j)
    nb, K = model.basis.n_basis, model.K
    theta = model.params.to_array() + L @ rng.standard_normal(L.shape[0])
    params = ParamVector.from_array(theta, nb, K)
    if K == 0:
        return np.tile(params.beta0, (obj.d, 1)), theta
    coefs = expand(params)
    mean, cov = score_posterior(params, coefs, obj)
    z = rng.standard_normal(mean.shape)
    u = mean + np.einsum("dkl,dl->dk", _sqrt_psd(cov), z)
    return params.beta0[None, :] + u @ coefs.matrix().T, theta


def draw_bootstrap(model: FittedModel, obj: PenalizedObjective, n_s: int = DEFAULT_N_S, seed: int = 0,
                   keep_thetas: bool = False) -> BootstrapSample:
    """Draw ``n_s`` bootstrap replicates of every subject's coefficients.

    Draw ``j`` uses its own stream keyed by ``(seed, j)``, so the first
    ``m`` draws are the same whatever ``n_s`` is.
    """
    if n_s < 1:
        raise ValueError("n_s must be positive")
    L = covariance_factor(model.hessian)
    deltas = np.empty((n_s, obj.d, model.basis.n_basis))
    thetas = np.empty((n_s, L.shape[0])) if keep_thetas else None
    for j in range(n_s):
        deltas[j], theta = _draw(model, obj, L, seed, j)
        if keep_thetas:
            thetas[j] = theta
    return BootstrapSample(deltas, int(seed), int(n_s), thetas)


def _quantile_levels(level: float):
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    return (1.0 - level) / 2.0, (1.0 + level) / 2.0


def _precision_warning(n_s: int, level: float) -> str | None:
    if n_s * (1.0 - level) / 2.0 < MIN_TAIL_DRAWS:
        return f"only {n_s * (1.0 - level) / 2.0:g} draws per tail at level {level}; quantiles are imprecise"
    return None


def confidence_band(sample: BootstrapSample, basis: OrthoBasis, subject: int, times, level: float = DEFAULT_LEVEL,
                    deriv: int = 0, extrapolate: bool = False) -> ConfidenceBand:
    """Pointwise quantile band for ``mu_i(t)`` (``deriv=0``) or ``mu_i'(t)`` (``deriv=1``)."""
    if deriv not in (0, 1):
        raise ValueError("deriv must be 0 or 1")
    if not 0 <= subject < sample.deltas.shape[1]:
        raise IndexError(f"unknown subject index {subject}")
    lo_q, hi_q = _quantile_levels(level)
    times = np.asarray(times, float)
    curves = sample.deltas[:, subject, :] @ eval_basis(basis, times, deriv, extrapolate).T
    lower, upper = np.quantile(curves, [lo_q, hi_q], axis=0)
    return ConfidenceBand(times, lower, upper, level, deriv, warning=_precision_warning(sample.n_s, level))


def all_bands(sample: BootstrapSample, basis: OrthoBasis, times, level: float = DEFAULT_LEVEL, deriv: int = 0,
              extrapolate: bool = False, chunk: int = 50):
    """Lower and upper bands for every subject at once, each of shape ``(d, N)``."""
    lo_q, hi_q = _quantile_levels(level)
    Bt = eval_basis(basis, np.asarray(times, float), deriv, extrapolate)
    d = sample.deltas.shape[1]
    lower = np.empty((d, len(Bt)))
    upper = np.empty((d, len(Bt)))
    for start in range(0, d, chunk):
        sl = slice(start, start + chunk)
        curves = sample.deltas[:, sl, :] @ Bt.T
        lower[sl], upper[sl] = np.quantile(curves, [lo_q, hi_q], axis=0)
    return lower, upper


def bands_to_csv(rows) -> str:
    """Render ``(subject, band)`` pairs with the band CSV columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BAND_COLUMNS)
    for subject, band in rows:
        est = band.estimate if band.estimate is not None else np.full(len(band.times), np.nan)
        for t, e, lo, hi in zip(band.times, est, band.lower, band.upper):
            w.writerow([subject, format_float(t), format_float(e), format_float(lo), format_float(hi),
                        format_float(band.level), band.deriv])
    return buf.getvalue()
