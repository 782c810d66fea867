"""Command-line front end: simulate, fit, predict, population, benchmark.

Exit codes: 0 success, 2 input/parse error, 3 convergence failure,
4 integrity error, 5 numerical error.  Failures print a JSON object to
stderr.  Every output file is written atomically and contains no
timestamps, so reruns with the same inputs and flags are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import DEFAULT_N_BASIS, build_basis
from .benchmark import PRESETS, BenchmarkConfig, preset, run_benchmark, select_cells
from .data import atomic_write, format_float, read_csv, write_csv
from .errors import (
    DataParseError,
    DegenerateDesignError,
    DomainError,
    EmptySubjectError,
    IndefiniteHessianError,
    IntegrityError,
    NonDifferentiableError,
    NonFiniteObjectiveError,
    NumericalError,
    TuningError,
)
from .fit import HESS_STEP, INIT_SCALE, N_RESTARTS, FittedModel, maximize, predict_trajectory
from .inference import DEFAULT_LEVEL, DEFAULT_N_S, bands_to_csv, confidence_band, draw_bootstrap
from .model import PenalizedObjective
from .optim import GTOL, MAX_ITER
from .population import DEFAULT_GRID_SIZE, gp_empirical, gp_fpc
from .simgen import DGPS, SimSpec, generate
from .tuning import DEFAULT_GAMMA_GRID, K_CAP, T_FVE, select_gamma

EXIT_OK, EXIT_PARSE, EXIT_CONVERGENCE, EXIT_INTEGRITY, EXIT_NUMERICAL = 0, 2, 3, 4, 5

EPILOG = f"""\
fixed defaults:
  basis              cubic B-splines, n_basis-4 interior knots at quantiles of pooled times,
                     orthonormalised by Gauss-Legendre quadrature (7 nodes per interval)
  gamma grid         13 log-spaced values from 1e-4 to 1e4
  t_fve              {T_FVE}; K_max starts at 2, capped at {K_CAP}
  optimizer          BFGS, strong-Wolfe line search, gradient tolerance {GTOL} (relative),
                     at most {MAX_ITER} iterations
  new component      alpha_K ~ N(0, {INIT_SCALE}^2 I); {N_RESTARTS} seeded restarts on failure or label swap
  Hessian            central differences of the exact gradient, step {HESS_STEP}*(1+|theta_j|)
  Laplace criterion  jitter 1e-8 escalated to 1e-4 before declaring a gamma invalid
  bootstrap          n_s={DEFAULT_N_S} draws, covariance jitter 1e-10..1e-6 * trace/p,
                     linear-interpolation quantiles
  population grid    {DEFAULT_GRID_SIZE} equally spaced points on the data range
exit codes: 0 ok, 2 parse/input error, 3 convergence failure, 4 integrity error, 5 numerical error
"""


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def _gamma_grid(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad gamma grid {text!r}") from None
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("gamma grid needs positive values")
    return vals


def _unit_open(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("value must lie in (0, 1)")
    return v


def _level(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("level must lie in [0, 1)")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("value must be a positive integer")
    return v


DEFAULT_GRID_TEXT = ",".join(format_float(g) for g in DEFAULT_GAMMA_GRID)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmfpc",
        description="Functional principal components for sparse longitudinal data.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=EPILOG, formatter_class=_Formatter)
        p.add_argument("--output-dir", required=True, help="directory for the output files")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        return p

    p = add("simulate", "simulate a benchmark dataset as long-format CSV")
    p.add_argument("--dgp", choices=DGPS, default="2FPC", help="generating process")
    p.add_argument("--d", type=_positive_int, default=100, help="number of subjects")
    p.add_argument("--n-i", type=_positive_int, default=5, help="observations per subject")

    p = add("fit", "tune gamma and K, fit the model and write it as JSON")
    p.add_argument("--input", required=True, help="long-format CSV with header subject,time,value")
    p.add_argument("--n-basis", type=int, default=DEFAULT_N_BASIS, help="basis dimension")
    p.add_argument("--gamma-grid", type=_gamma_grid, default=DEFAULT_GAMMA_GRID, metavar="G1,G2,...",
                   help=f"smoothing parameter grid (default {DEFAULT_GRID_TEXT})")
    p.add_argument("--t-fve", type=_unit_open, default=T_FVE, help="fraction-of-variance threshold for K")
    p.add_argument("--warm-start", metavar="MODEL_JSON", default=None,
                   help="refit at the saved model's K and gamma, starting from its estimates")

    p = add("predict", "subject trajectories and derivatives with bootstrap bands")
    p.add_argument("--model", required=True, help="model JSON written by 'fit'")
    p.add_argument("--input", required=True, help="the CSV the model was fitted to")
    p.add_argument("--subjects", default=None, help="comma-separated subject labels (default: all)")
    p.add_argument("--grid", type=_positive_int, default=DEFAULT_GRID_SIZE, help="number of grid points")
    p.add_argument("--n-s", type=_positive_int, default=DEFAULT_N_S, help="bootstrap draws")
    p.add_argument("--level", type=_level, default=DEFAULT_LEVEL, help="pointwise band level")

    p = add("population", "population mean and covariance by the FPC and empirical methods")
    p.add_argument("--model", required=True, help="model JSON written by 'fit'")
    p.add_argument("--method", choices=("fpc", "empirical", "both"), default="both", help="estimator")
    p.add_argument("--grid", type=_positive_int, default=DEFAULT_GRID_SIZE, help="number of grid points")

    p = add("benchmark", "run a simulation grid and write metric tables")
    p.add_argument("--grid", choices=PRESETS, default="minimal", help="grid preset")
    p.add_argument("--replicates", type=_positive_int, default=3, help="replicates per cell")
    p.add_argument("--cells", default=None, help="first N cells, or a list such as 100x5,300x5")
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--n-basis", type=int, default=DEFAULT_N_BASIS, help="basis dimension")
    p.add_argument("--gamma-grid", type=_gamma_grid, default=DEFAULT_GAMMA_GRID, metavar="G1,G2,...",
                   help=f"smoothing parameter grid (default {DEFAULT_GRID_TEXT})")
    p.add_argument("--t-fve", type=_unit_open, default=T_FVE, help="fraction-of-variance threshold for K")
    p.add_argument("--n-s", type=int, default=DEFAULT_N_S, help="bootstrap draws (0 skips the bands)")
    p.add_argument("--level", type=_level, default=DEFAULT_LEVEL, help="pointwise band level")
    return parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


# ---------------------------------------------------------------------------


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    atomic_write(path, text)
    return path


def _json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _load_data(path):
    data = read_csv(path)
    if data.d < 2:
        raise CliError(EXIT_PARSE, "input", f"{path}: need at least 2 subjects, found {data.d}")
    return data


def _load_model(path) -> FittedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INTEGRITY, "integrity", f"cannot read model {path}: {exc}") from None
    try:
        return FittedModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed model document: {exc}") from None


def cmd_simulate(args) -> int:
    spec = SimSpec(args.dgp, args.d, args.n_i, args.seed)
    sim = generate(spec)
    out = Path(args.output_dir)
    write_csv(sim.data, out / "data.csv")
    _write(out, "spec.json", spec.to_json())
    rows = ["subject,time,truth"]
    for i, (s, t) in enumerate(zip(sim.data.subjects, sim.data.times)):
        for tj, mj in zip(t, sim.truth(i, t)):
            rows.append(f"{s},{format_float(tj)},{format_float(mj)}")
    _write(out, "truth.csv", "\n".join(rows) + "\n")
    return EXIT_OK


def _fitted_csv(model: FittedModel, data) -> str:
    rows = ["subject,time,value,fitted"]
    for i, (s, t, y) in enumerate(zip(data.subjects, data.times, data.values)):
        for tj, yj, fj in zip(t, y, predict_trajectory(model, i, t)):
            rows.append(f"{s},{format_float(tj)},{format_float(yj)},{format_float(fj)}")
    return "\n".join(rows) + "\n"


def cmd_fit(args) -> int:
    data = _load_data(args.input)
    out = Path(args.output_dir)
    if args.warm_start:
        prev = _load_model(args.warm_start)
        if prev.data_fingerprint != data.fingerprint():
            raise IntegrityError("warm-start model was fitted to different data")
        obj = PenalizedObjective(data, prev.basis, prev.gamma)
        model = maximize(obj, prev.K, init=prev.params, seed=prev.seed)
        trace_doc = {"warm_start": True, "gamma": prev.gamma, "K": prev.K}
    else:
        basis = build_basis(data.pooled_times(), args.n_basis)
        obj = PenalizedObjective(data, basis, args.gamma_grid[0])
        trace = select_gamma(obj, args.gamma_grid, args.t_fve, seed=args.seed)
        model = trace.model
        trace_doc = trace.to_dict()
        print(f"{'gamma':>12} {'K':>3} {'sigma2_K':>12} {'criterion':>14}  status")
        for g, k, s2, v, st in trace.table_rows():
            crit = f"{v:14.6f}" if np.isfinite(v) else f"{'nan':>14}"
            print(f"{g:12.4g} {k:3d} {s2:12.6g} {crit}  {st}")
        print(f"chosen gamma {trace.chosen_gamma:g}, K = {model.K}")
    if not model.converged:
        raise CliError(EXIT_CONVERGENCE, "convergence", "optimizer did not converge",
                       diagnostics=model.diagnostics)
    _write(out, "model.json", model.to_json())
    _write(out, "tuning.json", _json(trace_doc))
    _write(out, "fitted.csv", _fitted_csv(model, data))
    return EXIT_OK


def _check_match(model: FittedModel, data):
    if data.d != model.d:
        raise IntegrityError(f"model has {model.d} subjects, data has {data.d}")
    if model.data_fingerprint and model.data_fingerprint != data.fingerprint():
        raise IntegrityError("data hash does not match the model")


def _subject_indices(data, selector):
    if not selector:
        return list(range(data.d))
    index = {s: i for i, s in enumerate(data.subjects)}
    out = []
    for s in selector.split(","):
        s = s.strip()
        if s not in index:
            raise CliError(EXIT_PARSE, "input", f"unknown subject {s!r}")
        out.append(index[s])
    return out


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.input)
    _check_match(model, data)
    obj = PenalizedObjective(data, model.basis, model.gamma)
    idx = _subject_indices(data, args.subjects)
    grid = np.linspace(*model.basis.domain, args.grid)
    sample = draw_bootstrap(model, obj, args.n_s, seed=args.seed)
    rows, warnings = [], set()
    for deriv in (0, 1):
        for i in idx:
            band = confidence_band(sample, model.basis, i, grid, args.level, deriv)
            band.estimate = predict_trajectory(model, i, grid, deriv)
            if band.warning:
                warnings.add(band.warning)
            rows.append((data.subjects[i], band))
    out = Path(args.output_dir)
    _write(out, "bands.csv", bands_to_csv(rows))
    for w in sorted(warnings):
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_population(args) -> int:
    model = _load_model(args.model)
    grid = np.linspace(*model.basis.domain, args.grid)
    out = Path(args.output_dir)
    methods = ("fpc", "empirical") if args.method == "both" else (args.method,)
    for m in methods:
        est = gp_fpc(model, grid) if m == "fpc" else gp_empirical(model, grid)
        _write(out, f"population_{m}_mean.csv", est.mean_csv())
        _write(out, f"population_{m}_cov.csv", est.cov_csv())
        _write(out, f"population_{m}.json", est.to_json())
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cells = select_cells(preset(args.grid, args.seed), args.cells)
    config = BenchmarkConfig(args.n_basis, tuple(args.gamma_grid), args.t_fve, args.n_s, args.level)

    def progress(res):
        r = res.record
        print(f"{r['dgp']} d={r['d']} n_i={r['n_i']} rep={r['replicate']}: {r['status']}", file=sys.stderr)

    result = run_benchmark(cells, args.replicates, config, workers=args.workers, progress=progress)
    out = Path(args.output_dir)
    _write(out, "summary.csv", result.summary_csv())
    _write(out, "runs.csv", result.runs_csv())
    _write(out, "trajectories.csv", result.trajectories_csv())
    _write(out, "failures.csv", result.failures_csv())
    _write(out, "report.txt", result.report())
    sys.stdout.write(result.report())
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "population": cmd_population,
    "benchmark": cmd_benchmark,
}

_EXIT_FOR = (
    (DataParseError, EXIT_PARSE, "parse"),
    (EmptySubjectError, EXIT_PARSE, "input"),
    (DegenerateDesignError, EXIT_PARSE, "input"),
    (DomainError, EXIT_PARSE, "input"),
    (TuningError, EXIT_CONVERGENCE, "convergence"),
    (IntegrityError, EXIT_INTEGRITY, "integrity"),
    (IndefiniteHessianError, EXIT_NUMERICAL, "numerical"),
    (NonFiniteObjectiveError, EXIT_NUMERICAL, "numerical"),
    (NonDifferentiableError, EXIT_NUMERICAL, "numerical"),
    (NumericalError, EXIT_NUMERICAL, "numerical"),
    (np.linalg.LinAlgError, EXIT_NUMERICAL, "numerical"),
)


def _fail(code: int, kind: str, message: str, **extra) -> int:
    doc = {"error": kind, "exit_code": code, "message": message, **extra}
    sys.stderr.write(json.dumps(doc, sort_keys=True, default=str) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except FileNotFoundError as exc:
        return _fail(EXIT_PARSE, "input", str(exc))
    except tuple(e for e, _, _ in _EXIT_FOR) as exc:
        for etype, code, kind in _EXIT_FOR:
            if isinstance(exc, etype):
                extra = {"line": exc.line} if isinstance(exc, DataParseError) and exc.line else {}
                return _fail(code, kind, str(exc), **extra)
        raise


if __name__ == "__main__":
    sys.exit(main())
