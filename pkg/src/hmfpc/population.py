"""Population-level Gaussian process estimates on a time grid.

The FPC method uses the fitted mean and components directly; the empirical
method takes the sample mean and covariance (divisor ``d``) of the
predicted subject trajectories.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .basis import eval_basis, rowdot
from .data import format_float
from .errors import DegenerateDesignError
from .fit import FittedModel, subject_coefficients

DEFAULT_GRID_SIZE = 100


@dataclass
class GpEstimate:
    """Mean ``m`` and covariance ``C`` of a Gaussian process on ``grid``.

    ``cov`` is symmetrized but not clamped; :meth:`clamped` returns a copy
    whose negative eigenvalues (rounding noise) are set to zero.
    """

    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    method: str

    def clamped(self) -> "GpEstimate":
        w, V = np.linalg.eigh(self.cov)
        C = (V * np.clip(w, 0.0, None)) @ V.T
        return GpEstimate(self.grid, self.mean, 0.5 * (C + C.T), self.method)

    def variance(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "grid": self.grid.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    def mean_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "mean", "sd"])
        for t, m, v in zip(self.grid, self.mean, self.variance()):
            w.writerow([format_float(t), format_float(m), format_float(np.sqrt(max(v, 0.0)))])
        return buf.getvalue()

    def cov_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", *[format_float(t) for t in self.grid]])
        for t, row in zip(self.grid, self.cov):
            w.writerow([format_float(t), *[format_float(c) for c in row]])
        return buf.getvalue()


def default_grid(model: FittedModel, n: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    lo, hi = model.basis.domain
    return np.linspace(lo, hi, n)


def _outer_mean(R: np.ndarray, divisor: float) -> np.ndarray:
    """``sum_i R_i R_i' / divisor`` entry by entry (independent of the grid size)."""
    C = np.sum(R[:, :, None] * R[:, None, :], axis=0) / divisor
    return 0.5 * (C + C.T)


def gp_fpc(model: FittedModel, grid=None) -> GpEstimate:
    """Mean ``f_0`` and covariance ``sum_k f_k(s) f_k(t)``."""
    grid = default_grid(model) if grid is None else np.asarray(grid, float)
    Bt = eval_basis(model.basis, grid)
    mean = rowdot(Bt, model.beta0[:, None])[:, 0]
    if model.K == 0:
        return GpEstimate(grid, mean, np.zeros((len(grid), len(grid))), "fpc")
    F = rowdot(Bt, model.coefs.matrix())
    return GpEstimate(grid, mean, _outer_mean(F.T, 1.0), "fpc")


def predicted_curves(model: FittedModel, grid, deriv: int = 0) -> np.ndarray:
    """All subjects' predicted trajectories on ``grid``, shape ``(d, N)``."""
    Bt = eval_basis(model.basis, np.asarray(grid, float), deriv)
    return rowdot(subject_coefficients(model), Bt.T)


def gp_empirical(model: FittedModel, grid=None) -> GpEstimate:
    """Sample mean and covariance (divisor ``d``) of the predicted trajectories.

    Raises
    ------
    DegenerateDesignError
        With fewer than two subjects.
    """
    if model.d < 2:
        raise DegenerateDesignError("empirical covariance needs at least two subjects")
    grid = default_grid(model) if grid is None else np.asarray(grid, float)
    mu = predicted_curves(model, grid)
    mean = mu.mean(axis=0)
    return GpEstimate(grid, mean, _outer_mean(mu - mean, model.d), "empirical")
