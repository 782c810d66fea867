import math

import pytest

from hmfpc.benchmark import (
    PRESETS,
    BenchmarkConfig,
    preset,
    run_benchmark,
    run_replicate,
    select_cells,
)
from hmfpc.simgen import SimSpec

FAST = BenchmarkConfig(n_basis=8, gamma_grid=(0.05,), n_s=50, grid_size=40)


def test_presets():
    for name in PRESETS:
        assert preset(name)
    assert len(preset("paper-2fpc")) == 18
    assert {c.n_i for c in preset("fig4-desk")} == {3}
    with pytest.raises(ValueError):
        preset("nope")


def test_select_cells():
    cells = preset("paper-sitar")
    assert select_cells(cells, None) == cells
    assert select_cells(cells, "2") == cells[:2]
    picked = select_cells(cells, "100x5,300x10")
    assert [(c.d, c.n_i) for c in picked] == [(100, 5), (300, 10)]
    with pytest.raises(ValueError):
        select_cells(cells, "7x7")


@pytest.fixture(scope="module")
def small_run():
    return run_benchmark([SimSpec("2FPC", 30, 5, 11)], 2, FAST)


def test_rows_per_metric(small_run):
    metrics = {(r[3], r[4]) for r in small_run.summary_rows}
    expected = {("HM-FPC", m) for m in ("RMISE", "coverage", "mean_width")}
    expected |= {(m, x) for m in ("fpc", "empirical") for x in ("RMWE", "RMSE_m", "RMSE_C")}
    assert metrics == expected
    assert len(small_run.summary_rows) == len(expected)
    assert not small_run.failures
    for row in small_run.summary_rows:
        assert math.isfinite(row[5]) and row[6] <= row[5] <= row[7]
    # five quantile subjects on the grid of the typical run
    assert len(small_run.trajectory_rows) == 5 * FAST.grid_size


def test_same_seed_same_tables(small_run):
    again = run_benchmark([SimSpec("2FPC", 30, 5, 11)], 2, FAST)
    assert again.summary_csv() == small_run.summary_csv()
    assert again.runs_csv() == small_run.runs_csv()
    assert again.trajectories_csv() == small_run.trajectories_csv()
    assert again.report() == small_run.report()


def test_replicate_seeds(small_run):
    assert [r.record["seed"] for r in small_run.runs] == [11, 12]
    single = run_replicate(SimSpec("2FPC", 30, 5, 11), 1, FAST)
    assert single.record["mise"] == small_run.runs[1].record["mise"]


def test_failures_are_recorded():
    # one subject with one observation cannot support a basis
    res = run_benchmark([SimSpec("2FPC", 1, 1, 0), SimSpec("2FPC", 30, 5, 11)], 1, FAST)
    assert len(res.failures) == 1
    assert res.runs[0].record["status"].startswith("failed:")
    assert res.runs[1].record["status"] == "ok"
    assert "failures: 1" in res.report()
    assert res.failures_csv().count("\n") == 2


def test_skip_bands():
    res = run_replicate(SimSpec("2FPC", 30, 5, 3), 0, BenchmarkConfig(n_basis=8, gamma_grid=(0.05,), n_s=0))
    assert res.record["status"] == "ok"
    assert math.isnan(res.record["coverage"])
