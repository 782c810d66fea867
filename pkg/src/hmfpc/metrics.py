"""Error measures for trajectories and population processes, and their
aggregation across simulation replicates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .data import format_float
from .errors import NumericalError

Z95 = 1.959963984540054
SUMMARY_COLUMNS = ("dgp", "d", "n_i", "method", "metric", "value", "ci_lo", "ci_hi")


@dataclass
class TrajectoryScore:
    ise_per_subject: np.ndarray
    mise: float
    coverage: float = math.nan
    mean_width: float = math.nan


@dataclass
class WassersteinScore:
    w2_bar: float
    dm2_bar: float
    dc2_bar: float


def _check_grid(grid, *curves):
    grid = np.asarray(grid, float)
    for c in curves:
        if np.shape(c)[-1] != len(grid):
            raise ValueError(f"curve has {np.shape(c)[-1]} points, grid has {len(grid)}")
    return grid


def ise(est, truth, grid) -> float:
    """Integrated squared error by the trapezoid rule on ``grid``."""
    grid = _check_grid(grid, est, truth)
    diff = np.asarray(est, float) - np.asarray(truth, float)
    return float(np.trapezoid(diff**2, grid))


def trajectory_score(est, truth, grid, lower=None, upper=None) -> TrajectoryScore:
    """ISE per subject, MISE, and band coverage/width for ``(d, N)`` curve arrays.

    Coverage is the fraction of grid points inside the band, averaged over
    points within a subject and then over subjects.
    """
    est = np.atleast_2d(np.asarray(est, float))
    truth = np.atleast_2d(np.asarray(truth, float))
    grid = _check_grid(grid, est, truth)
    ises = np.trapezoid((est - truth) ** 2, grid, axis=1)
    score = TrajectoryScore(ises, float(ises.mean()))
    if lower is not None and upper is not None:
        lower = np.atleast_2d(lower)
        upper = np.atleast_2d(upper)
        inside = (truth >= lower) & (truth <= upper)
        score.coverage = float(inside.mean(axis=1).mean())
        score.mean_width = float((upper - lower).mean(axis=1).mean())
    return score


def _psd_factor(C: np.ndarray) -> np.ndarray:
    """``L`` with ``L L' = C`` after clamping negative eigenvalues to zero."""
    try:
        w, V = np.linalg.eigh(0.5 * (C + C.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigendecomposition failed") from exc
    return V * np.sqrt(np.clip(w, 0.0, None))


def sqrtm_psd(C: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    try:
        w, V = np.linalg.eigh(0.5 * (C + C.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigendecomposition failed") from exc
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def wasserstein2(est, truth) -> WassersteinScore:
    """Squared 2-Wasserstein distance between ``N(m_hat, C_hat)`` and ``N(m, C)``, divided by ``N``.

    Returns the total and its split into a mean part ``|m_hat - m|^2 / N``
    and a covariance part ``tr(C_hat + C - 2 (C^1/2 C_hat C^1/2)^1/2) / N``.

    The cross term is the nuclear norm of ``L_hat' L`` for factors
    ``L L' = C`` and ``L_hat L_hat' = C_hat``: its singular values are the
    square roots of the eigenvalues of ``C^1/2 C_hat C^1/2``, obtained
    without squaring the spectrum, so zero eigenvalues of low-rank
    covariances do not turn rounding noise into ``sqrt(eps)`` errors.
    """
    if len(est.grid) != len(truth.grid) or not np.allclose(est.grid, truth.grid, rtol=0, atol=1e-12):
        raise ValueError("estimates are on different grids")
    N = len(est.grid)
    dm = float(np.sum((est.mean - truth.mean) ** 2))
    L, Lh = _psd_factor(truth.cov), _psd_factor(est.cov)
    try:
        cross = float(np.linalg.svd(Lh.T @ L, compute_uv=False).sum())
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular value decomposition failed") from exc
    # traces of the clamped matrices, consistent with the factors
    dc = float(np.sum(L * L) + np.sum(Lh * Lh) - 2.0 * cross)
    return WassersteinScore((dm + dc) / N, dm / N, dc / N)


def _mean_ci(x):
    x = np.asarray(x, float)
    m = float(x.mean())
    if len(x) < 2:
        return m, math.nan, math.nan
    half = Z95 * float(x.std(ddof=1)) / math.sqrt(len(x))
    return m, m - half, m + half


def _root_ci(x):
    m, lo, hi = _mean_ci(x)
    root = lambda v: v if math.isnan(v) else math.sqrt(max(v, 0.0))  # noqa: E731
    return root(m), root(lo), root(hi)


# per-run key -> (reported metric, transform)
_AGGREGATES = (
    ("mise", "RMISE", _root_ci),
    ("coverage", "coverage", _mean_ci),
    ("mean_width", "mean_width", _mean_ci),
    ("w2_bar", "RMWE", _root_ci),
    ("dm2_bar", "RMSE_m", _root_ci),
    ("dc2_bar", "RMSE_C", _root_ci),
)


def aggregate_runs(scores) -> dict:
    """Summarise per-run values across replicates.

    ``scores`` is a sequence of dicts holding any of ``mise``, ``coverage``,
    ``mean_width``, ``w2_bar``, ``dm2_bar``, ``dc2_bar``.  Root metrics are
    square roots of across-run means; their 95% intervals are the square
    roots of the normal-approximation interval for the mean.  Returns
    ``{metric: (value, ci_lo, ci_hi)}``.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("no runs to aggregate")
    out = {}
    for key, name, fn in _AGGREGATES:
        vals = [s[key] for s in scores if key in s and s[key] is not None and math.isfinite(s[key])]
        if vals:
            out[name] = fn(vals)
    return out


def typical_run(values) -> int:
    """Index of the value closest to the mean (lowest index on ties)."""
    v = np.asarray(values, float)
    if v.size == 0:
        raise ValueError("no runs")
    return int(np.argmin(np.abs(v - v.mean())))


def quantile_subjects(values, probs=(0.0, 0.25, 0.5, 0.75, 1.0)) -> list:
    """Indices of the order statistics at the given probabilities.

    Position ``round(p * (n - 1))`` in the stable ascending order, so ``0``
    and ``1`` give the minimum and maximum.
    """
    v = np.asarray(values, float)
    order = np.argsort(v, kind="stable")
    return [int(order[int(round(p * (len(v) - 1)))]) for p in probs]


def _cell(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else format_float(x)
    return str(x)


def summary_csv(rows) -> str:
    """Rows of ``(dgp, d, n_i, method, metric, value, ci_lo, ci_hi)``; NaN is written empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    return buf.getvalue()
