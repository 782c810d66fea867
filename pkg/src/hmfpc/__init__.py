"""Functional principal components for sparse longitudinal data.

Subject trajectories are modelled as ``mu_i(t) = f_0(t) + sum_k u_ik f_k(t)``
with orthogonal component functions represented in an orthonormal cubic
B-spline basis, estimated by penalized maximum likelihood, with the
smoothing parameter and number of components chosen automatically.
"""

__version__ = "0.1.0"

from .basis import OrthoBasis, build_basis, eval_basis
from .data import LongitudinalDataset, parse_csv, read_csv, write_csv
from .errors import (
    DataParseError,
    DegenerateDesignError,
    DomainError,
    EmptySubjectError,
    HmfpcError,
    IndefiniteHessianError,
    IntegrityError,
    NonDifferentiableError,
    NonFiniteObjectiveError,
    NumericalError,
    TuningError,
)
from .fit import FittedModel, fit_sequence, maximize, predict_trajectory
from .inference import BootstrapSample, ConfidenceBand, confidence_band, draw_bootstrap
from .metrics import aggregate_runs, trajectory_score, wasserstein2
from .model import PenalizedObjective, log_likelihood, penalized_log_likelihood
from .orthoparam import OrthoCoefs, ParamVector, expand
from .population import GpEstimate, gp_empirical, gp_fpc
from .simgen import SimSpec, generate
from .tuning import approx_log_marginal_likelihood, select_gamma, select_K

__all__ = [name for name in dir() if not name.startswith("_")]
