"""Choice of the number of components and of the smoothing parameter.

``K`` is the smallest count whose fraction of variance explained,
``(s2_0 - s2_K) / (s2_0 - s2_Kmax)``, exceeds a threshold, with ``K_max``
grown one step at a time.  ``gamma`` maximises a Laplace approximation to
the log marginal likelihood evaluated at the selected ``K``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._rng import float_key
from .errors import IndefiniteHessianError, NumericalError, TuningError
from .fit import FittedModel, fit_sequence
from .model import PenalizedObjective

T_FVE = 0.999
K_CAP = 8
K_MAX_START = 2
DEGENERATE_TOL = 1e-10
DEFAULT_GAMMA_GRID = tuple(float(g) for g in np.logspace(-4, 4, 13))
JITTER_START = 1e-8
JITTER_MAX = 1e-4
RANK_RTOL = 1e-10


class RankMismatchWarning(RuntimeWarning):
    pass


@dataclass
class SelectKResult:
    K: int
    fits: list
    sigma2: np.ndarray
    fve: np.ndarray
    K_max: int
    saturated: bool = False
    degenerate: bool = False


def fve_table(sigma2: np.ndarray) -> np.ndarray:
    """``FVE(K; K_max)`` for ``K = 0 .. K_max`` with ``K_max = len(sigma2) - 1``."""
    s = np.asarray(sigma2, float)
    return (s[0] - s) / (s[0] - s[-1])


def select_K(obj: PenalizedObjective, gamma: float | None = None, t_fve: float = T_FVE,
             seed: int = 0, K_cap: int = K_CAP) -> SelectKResult:
    """Smallest ``K`` explaining more than ``t_fve`` of the variance explainable by ``K_max``.

    Fits ``K = 0 .. K_max`` starting from ``K_max = 2``; while
    ``FVE(K_max - 1; K_max) <= t_fve`` the next ``K_max`` is added.  At
    ``K_max = K_cap`` the cap is returned with ``saturated = True``.  If the
    residual variance barely moves (``s2_0 - s2_Kmax < 1e-10 s2_0``) there is
    nothing to explain and ``K = 0``.
    """
    if not 0 < t_fve < 1:
        raise ValueError("t_fve must lie in (0, 1)")
    if gamma is not None:
        obj = obj.with_gamma(gamma)
    K_max = min(K_MAX_START, K_cap)
    fits = fit_sequence(obj, K_max, seed=seed)
    while True:
        avail = len(fits) - 1
        s2 = np.array([f.sigma2_hat for f in fits])
        if avail < 1 or s2[0] - s2[-1] < DEGENERATE_TOL * s2[0]:
            return SelectKResult(0, fits, s2, np.zeros(len(s2)), avail, degenerate=True)
        fve = fve_table(s2)
        passing = np.flatnonzero(fve[:avail] > t_fve)
        if passing.size:
            return SelectKResult(int(passing[0]), fits, s2, fve, avail)
        if avail < K_max:
            # the sequence stopped on a failed fit; use what was fitted
            return SelectKResult(avail, fits, s2, fve, avail, saturated=True)
        if K_max >= K_cap:
            return SelectKResult(K_cap, fits, s2, fve, K_max, saturated=True)
        K_max += 1
        fits = fit_sequence(obj, K_max, seed=seed, start=fits)


def prior_ranks(n_basis: int, K: int) -> list:
    """``r_k = min(n_B - 2, n_B - k + 1)`` for ``k = 0 .. K``."""
    return [min(n_basis - 2, n_basis - k + 1) for k in range(K + 1)]


def log_pdet(S: np.ndarray, rank: int, k: int = 0) -> float:
    """Log of the product of the ``rank`` largest eigenvalues of symmetric ``S``."""
    try:
        w = np.linalg.eigvalsh(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition of S_{k} failed") from exc
    w = w[::-1]
    numeric = int(np.sum(w > RANK_RTOL * max(w[0], 0.0)))
    if numeric != rank:
        warnings.warn(f"S_{k}: numerical rank {numeric} differs from the assumed rank {rank}", RankMismatchWarning)
    top = w[:rank]
    if np.any(top <= 0):
        raise NumericalError(f"S_{k} has fewer than {rank} positive eigenvalues")
    return float(np.sum(np.log(top)))


def log_prior_remainder(params, gamma: float, s_matrices: list) -> float:
    """``r = 1/2 sum_k log|S_k|_+ + R (log gamma - 1)``, ``R = sum_k r_k``.

    ``s_matrices`` lists ``S_0 = S`` (for the mean) followed by
    ``S_1 .. S_K``.
    """
    K = params.K
    if len(s_matrices) != K + 1:
        raise ValueError(f"expected {K + 1} penalty matrices, got {len(s_matrices)}")
    ranks = prior_ranks(params.n_basis, K)
    half_logdet = 0.5 * sum(log_pdet(S, r, k) for k, (S, r) in enumerate(zip(s_matrices, ranks)))
    return half_logdet + sum(ranks) * (math.log(gamma) - 1.0)


def neg_hessian_logdet(H: np.ndarray) -> float:
    """``log det(-H)`` by Cholesky, with diagonal jitter from 1e-8 up to 1e-4."""
    A = -0.5 * (H + H.T)
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(len(A)))
            return 2.0 * float(np.sum(np.log(np.diag(L))))
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise IndefiniteHessianError("Hessian is not negative definite even with jitter 1e-4") from None


def approx_log_marginal_likelihood(model: FittedModel, obj: PenalizedObjective | None = None) -> float:
    """Laplace criterion ``l_p + r + (p/2) log 2 pi - 1/2 log det(-H)``."""
    gamma = model.gamma if obj is None else obj.gamma
    S = model.basis.penalty
    s_mats = [S] + list(model.coefs.s_matrices)
    r = log_prior_remainder(model.params, gamma, s_mats)
    p = len(model.params.to_array())
    return model.loglik_pen + r + 0.5 * p * math.log(2.0 * math.pi) - 0.5 * neg_hessian_logdet(model.hessian)


@dataclass
class TuningTrace:
    gamma_grid: list
    laml_values: list
    chosen_gamma: float
    per_gamma_K: list
    fve_threshold: float
    sigma2_by_K: list
    per_gamma_sigma2: list = field(default_factory=list)
    status: list = field(default_factory=list)
    model: FittedModel | None = None
    selection: SelectKResult | None = None
    # selected-K fit at every grid point, for diagnostics (not serialized)
    per_gamma_models: list = field(default_factory=list)

    @property
    def chosen_index(self) -> int:
        return self.gamma_grid.index(self.chosen_gamma)

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or not math.isfinite(v) else v

        return {
            "gamma_grid": self.gamma_grid,
            "laml_values": [clean(v) for v in self.laml_values],
            "chosen_gamma": self.chosen_gamma,
            "per_gamma_K": self.per_gamma_K,
            "fve_threshold": self.fve_threshold,
            "sigma2_by_K": self.sigma2_by_K,
            "per_gamma_sigma2": self.per_gamma_sigma2,
            "status": self.status,
        }

    def table_rows(self):
        """``(gamma, K, sigma2_K, criterion, status)`` per grid point."""
        for g, k, s2, v, st in zip(self.gamma_grid, self.per_gamma_K, self.per_gamma_sigma2, self.laml_values, self.status):
            yield g, k, s2, v, st


def gamma_seed(seed: int, gamma: float) -> int:
    """Per-grid-point seed that does not depend on the grid's order or length."""
    return int(np.random.SeedSequence([int(seed), float_key(gamma)]).generate_state(1)[0])


def select_gamma(obj: PenalizedObjective, grid=None, t_fve: float = T_FVE, seed: int = 0,
                 K_cap: int = K_CAP) -> TuningTrace:
    """Run :func:`select_K` at each ``gamma`` and keep the best Laplace criterion.

    The grid is sorted and de-duplicated first, so the result does not depend
    on its order; ties go to the smallest ``gamma``.  Points whose fit does
    not converge or whose Hessian is indefinite are marked invalid.

    Raises
    ------
    TuningError
        If no grid point is valid.
    """
    grid = DEFAULT_GAMMA_GRID if grid is None else grid
    grid = sorted({float(g) for g in grid})
    if not grid:
        raise ValueError("gamma grid is empty")
    if grid[0] <= 0:
        raise ValueError("gamma values must be positive")
    values, Ks, s2K, status, sels = [], [], [], [], []
    for g in grid:
        sel = select_K(obj.with_gamma(g), None, t_fve, seed=gamma_seed(seed, g), K_cap=K_cap)
        fit = sel.fits[sel.K]
        sels.append(sel)
        Ks.append(sel.K)
        s2K.append(fit.sigma2_hat)
        if not fit.converged:
            values.append(math.nan)
            status.append("not converged")
            continue
        try:
            values.append(approx_log_marginal_likelihood(fit))
            status.append("ok")
        except (IndefiniteHessianError, NumericalError) as exc:
            values.append(math.nan)
            status.append(f"invalid: {exc}")
    valid = [i for i, v in enumerate(values) if math.isfinite(v)]
    if not valid:
        raise TuningError("no gamma grid point gave a valid criterion: " + "; ".join(sorted(set(status))))
    best = max(valid, key=lambda i: (values[i], -i))
    sel = sels[best]
    return TuningTrace(
        gamma_grid=grid,
        laml_values=values,
        chosen_gamma=grid[best],
        per_gamma_K=Ks,
        fve_threshold=t_fve,
        sigma2_by_K=[float(s) for s in sel.sigma2],
        per_gamma_sigma2=s2K,
        status=status,
        model=sel.fits[sel.K],
        selection=sel,
        per_gamma_models=[x.fits[x.K] for x in sels],
    )
