"""Simulation study harness: generate, tune, fit, bootstrap and score.

Each (cell, replicate) pair is an independent task seeded with
``spec.seed + replicate``.  Failures are recorded and the grid carries on.
Results are assembled in (cell, replicate) order whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import math
import multiprocessing
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import DEFAULT_N_BASIS, build_basis
from .data import format_float
from .errors import HmfpcError
from .inference import DEFAULT_LEVEL, DEFAULT_N_S, all_bands, draw_bootstrap
from .metrics import aggregate_runs, quantile_subjects, summary_csv, trajectory_score, typical_run, wasserstein2
from .model import PenalizedObjective
from .population import DEFAULT_GRID_SIZE, GpEstimate, gp_empirical, gp_fpc, predicted_curves
from .simgen import SimSpec, generate
from .tuning import DEFAULT_GAMMA_GRID, T_FVE, select_gamma, select_K

METHOD = "HM-FPC"
PAPER_DS = (50, 100, 200, 300, 400, 500)
PAPER_NS = (3, 5, 10)

# Published single-dataset values for the 2FPC cell d=100, n_i=5, kept for
# report context only: (method, RMISE, mean CI width, coverage).
REFERENCE_ROWS = (
    ("HGAM-GS", 2.36, 1.99, 0.93),
    ("PACE", 2.91, 1.68, 0.66),
    ("HM-FPC", 0.34, 0.39, 0.97),
)

RUN_COLUMNS = (
    "dgp", "d", "n_i", "replicate", "seed", "status", "gamma", "K", "sigma2",
    "mise", "coverage", "mean_width",
    "fpc_w2_bar", "fpc_dm2_bar", "fpc_dc2_bar",
    "empirical_w2_bar", "empirical_dm2_bar", "empirical_dc2_bar", "error",
)
TRAJ_COLUMNS = ("dgp", "d", "n_i", "replicate", "subject", "rank", "time", "truth", "estimate", "lower", "upper")


@dataclass(frozen=True)
class BenchmarkConfig:
    n_basis: int = DEFAULT_N_BASIS
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    t_fve: float = T_FVE
    n_s: int = DEFAULT_N_S
    level: float = DEFAULT_LEVEL
    grid_size: int = DEFAULT_GRID_SIZE


def preset(name: str, seed: int = 0) -> list:
    """Named grids of :class:`SimSpec` cells."""
    if name in ("paper-2fpc", "paper-lmm-ri", "paper-sitar"):
        dgp = {"paper-2fpc": "2FPC", "paper-lmm-ri": "LMM-RI", "paper-sitar": "SITAR"}[name]
        return [SimSpec(dgp, d, n, seed) for n in PAPER_NS for d in PAPER_DS]
    if name == "minimal":
        return [SimSpec("2FPC", 50, 5, seed)]
    if name == "fig4-desk":
        return [SimSpec("2FPC", d, 3, seed) for d in (50, 100, 200, 300)]
    raise ValueError(f"unknown grid preset {name!r}; choose from {PRESETS}")


PRESETS = ("paper-2fpc", "paper-lmm-ri", "paper-sitar", "minimal", "fig4-desk")


def select_cells(cells: list, selector: str | None) -> list:
    """Restrict a grid: ``"3"`` keeps the first three cells, ``"100x5,300x5"`` picks by ``d x n_i``."""
    if not selector:
        return cells
    selector = selector.strip()
    if selector.isdigit():
        return cells[: int(selector)]
    wanted = []
    for part in selector.split(","):
        d, n = part.lower().split("x")
        wanted.append((int(d), int(n)))
    out = [c for c in cells if (c.d, c.n_i) in wanted]
    if len(out) != len(wanted):
        raise ValueError(f"cell selector {selector!r} does not match the grid")
    return out


@dataclass
class RunResult:
    spec: SimSpec
    replicate: int
    record: dict
    trajectories: list = field(default_factory=list)


def _true_gp(sim, grid) -> GpEstimate:
    m, C = sim.true_gp(grid)
    return GpEstimate(grid, m, C, "truth").clamped()


def run_replicate(spec: SimSpec, replicate: int, config: BenchmarkConfig) -> RunResult:
    """Full pipeline for one simulated dataset; never raises on model failure."""
    seed = spec.seed + replicate
    rec = {"dgp": spec.dgp, "d": spec.d, "n_i": spec.n_i, "replicate": replicate, "seed": seed,
           "status": "ok", "error": ""}
    traj = []
    stage = "simulate"
    try:
        sim = generate(replace(spec, seed=seed))
        stage = "fit"
        basis = build_basis(sim.data.pooled_times(), config.n_basis)
        obj = PenalizedObjective(sim.data, basis, config.gamma_grid[0])
        if len(config.gamma_grid) == 1:
            sel = select_K(obj, None, config.t_fve, seed=seed)
            model = sel.fits[sel.K]
        else:
            model = select_gamma(obj, config.gamma_grid, config.t_fve, seed=seed).model
        rec.update(gamma=model.gamma, K=model.K, sigma2=model.sigma2_hat)
        grid = np.linspace(*basis.domain, config.grid_size)
        est = predicted_curves(model, grid)
        truth = np.array([sim.truth(i, grid) for i in range(spec.d)])
        lower = upper = None
        if config.n_s > 0:
            stage = "bootstrap"
            sample = draw_bootstrap(model, obj, config.n_s, seed=seed)
            lower, upper = all_bands(sample, basis, grid, config.level)
        score = trajectory_score(est, truth, grid, lower, upper)
        rec.update(mise=score.mise, coverage=score.coverage, mean_width=score.mean_width)
        stage = "population"
        true_gp = _true_gp(sim, grid)
        for name, fn in (("fpc", gp_fpc), ("empirical", gp_empirical)):
            w = wasserstein2(fn(model, grid).clamped(), true_gp)
            rec.update({f"{name}_w2_bar": w.w2_bar, f"{name}_dm2_bar": w.dm2_bar, f"{name}_dc2_bar": w.dc2_bar})
        for rank, i in enumerate(quantile_subjects(score.ise_per_subject)):
            lo = lower[i] if lower is not None else np.full(len(grid), np.nan)
            hi = upper[i] if upper is not None else np.full(len(grid), np.nan)
            traj.append((i, rank, grid, truth[i], est[i], lo, hi))
    except (HmfpcError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        rec["status"] = f"failed:{stage}"
        rec["error"] = f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # recorded, never aborts the grid
        rec["status"] = f"failed:{stage}"
        rec["error"] = f"{type(exc).__name__}: {exc} | " + traceback.format_exc(limit=1).strip().splitlines()[-1]
    return RunResult(spec, replicate, rec, traj)


def _task(args):
    spec, r, config = args
    t0 = time.perf_counter()
    res = run_replicate(spec, r, config)
    res.record["_seconds"] = time.perf_counter() - t0
    return res


@dataclass
class BenchmarkResult:
    runs: list
    summary_rows: list
    failures: list
    trajectory_rows: list

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.runs:
            w.writerow([_fmt(r.record.get(c, "")) for c in RUN_COLUMNS])
        return buf.getvalue()

    def summary_csv(self) -> str:
        return summary_csv(self.summary_rows)

    def trajectories_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for row in self.trajectory_rows:
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def failures_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("dgp", "d", "n_i", "replicate", "method", "seed", "error"))
        for f in self.failures:
            w.writerow(f)
        return buf.getvalue()

    def report(self) -> str:
        lines = [f"runs: {len(self.runs)}  failures: {len(self.failures)}", ""]
        lines.append(f"{'dgp':8} {'d':>5} {'n_i':>4} {'method':10} {'metric':11} {'value':>10} {'95% interval':>23}")
        for dgp, d, n, method, metric, v, lo, hi in self.summary_rows:
            ci = "" if math.isnan(lo) else f"[{lo:.4g}, {hi:.4g}]"
            lines.append(f"{dgp:8} {d:5d} {n:4d} {method:10} {metric:11} {v:10.4g} {ci:>23}")
        lines += ["", "reference values (2FPC, d=100, n_i=5, single dataset):"]
        for name, rmise, width, cov in REFERENCE_ROWS:
            lines.append(f"  {name:8} RMISE {rmise:.2f}  mean width {width:.2f}  coverage {cov:.0%}")
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else format_float(x)
    return str(x)


def _summarise(cell_runs: list) -> tuple:
    spec = cell_runs[0].spec
    ok = [r.record for r in cell_runs if r.record["status"] == "ok"]
    rows, traj = [], []
    if not ok:
        return rows, traj
    key = (spec.dgp, spec.d, spec.n_i)
    indiv = aggregate_runs([{k: r[k] for k in ("mise", "coverage", "mean_width")} for r in ok])
    for metric in ("RMISE", "coverage", "mean_width"):
        if metric in indiv:
            rows.append((*key, METHOD, metric, *indiv[metric]))
    for name in ("fpc", "empirical"):
        agg = aggregate_runs([{k: r[f"{name}_{k}"] for k in ("w2_bar", "dm2_bar", "dc2_bar")} for r in ok])
        for metric in ("RMWE", "RMSE_m", "RMSE_C"):
            rows.append((*key, name, metric, *agg[metric]))
    ok_runs = [r for r in cell_runs if r.record["status"] == "ok"]
    t = typical_run([r.record["mise"] for r in ok_runs])
    run = ok_runs[t]
    for i, rank, grid, truth, est, lo, hi in run.trajectories:
        for j in range(len(grid)):
            traj.append((*key, run.replicate, i, rank, grid[j], truth[j], est[j], lo[j], hi[j]))
    return rows, traj


def run_benchmark(grid: list, replicates: int, config: BenchmarkConfig | None = None, workers: int = 1,
                  progress=None) -> BenchmarkResult:
    """Run every cell of ``grid`` for ``replicates`` seeded replicates.

    Returns per-run records, summary rows ``(dgp, d, n_i, method, metric,
    value, ci_lo, ci_hi)``, recorded failures and the typical run's
    trajectories (subjects at the ISE quantiles) for each cell.
    """
    config = config or BenchmarkConfig()
    tasks = [(spec, r, config) for spec in grid for r in range(replicates)]
    if workers <= 1:
        results = []
        for t in tasks:
            results.append(_task(t))
            if progress:
                progress(results[-1])
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = []
            for res in pool.map(_task, tasks):
                results.append(res)
                if progress:
                    progress(res)
    summary, traj, failures = [], [], []
    for c, spec in enumerate(grid):
        cell = results[c * replicates : (c + 1) * replicates]
        rows, tr = _summarise(cell)
        summary += rows
        traj += tr
        for r in cell:
            if r.record["status"] != "ok":
                failures.append((spec.dgp, spec.d, spec.n_i, r.replicate, METHOD, r.record["seed"], r.record["error"]))
    for r in results:
        r.record.pop("_seconds", None)
    return BenchmarkResult(results, summary, failures, traj)
