import json

import numpy as np
import pytest

from hmfpc.basis import build_basis, eval_basis, project
from hmfpc.errors import DegenerateDesignError
from hmfpc.fit import FittedModel, fit_sequence
from hmfpc.model import PenalizedObjective
from hmfpc.orthoparam import ParamVector, alphas_from_betas, expand, param_dim
from hmfpc.population import default_grid, gp_empirical, gp_fpc, predicted_curves
from hmfpc.simgen import SimSpec, generate


@pytest.fixture(scope="module")
def fitted():
    sim = generate(SimSpec("2FPC", 50, 5, 6))
    obj = PenalizedObjective(sim.data, build_basis(sim.data.pooled_times()), 0.05)
    fits = fit_sequence(obj, 2, seed=6)
    return obj, fits


def _model(basis, betas, scores, beta0=None):
    nb = basis.n_basis
    beta0 = np.zeros(nb) if beta0 is None else beta0
    params = ParamVector(beta0, alphas_from_betas(betas, nb), 0.0)
    coefs = expand(params, basis.penalty)
    p = param_dim(nb, len(betas))
    return FittedModel(basis, params, coefs, 1.0, np.asarray(scores, float).reshape(len(scores), len(betas)),
                       -np.eye(p), 0.0, True)


def test_k0_zero_covariance(fitted):
    _, fits = fitted
    est = gp_fpc(fits[0])
    assert est.method == "fpc"
    assert np.array_equal(est.cov, np.zeros((100, 100)))
    assert np.allclose(est.grid, default_grid(fits[0]))


def test_constant_component(unit_basis):
    c = 0.7
    one, _ = project(unit_basis, lambda t: np.ones_like(t))
    model = _model(unit_basis, [c * one], np.zeros((3, 1)))
    est = gp_fpc(model, np.linspace(0, 1, 9))
    assert np.abs(est.cov - c**2).max() < 1e-12


def test_entrywise_covariance(fitted):
    _, fits = fitted
    model = fits[2]
    grid = np.linspace(*model.basis.domain, 12)
    est = gp_fpc(model, grid)
    for a in (0, 5, 11):
        for b in (0, 3, 11):
            fa = eval_basis(model.basis, grid[a]) @ model.coefs.matrix()
            fb = eval_basis(model.basis, grid[b]) @ model.coefs.matrix()
            assert est.cov[a, b] == pytest.approx(float(fa @ fb), abs=1e-12)
    assert np.allclose(est.mean, eval_basis(model.basis, grid) @ model.beta0, atol=1e-12)


def test_fpc_rank_and_symmetry(fitted):
    _, fits = fitted
    est = gp_fpc(fits[2])
    assert np.abs(est.cov - est.cov.T).max() <= 1e-12
    w = np.sort(np.linalg.eigvalsh(est.cov))[::-1]
    assert w[2] < 1e-8 * w[0]
    assert w.min() >= -1e-10 * w[0]
    cl = est.clamped()
    assert np.linalg.eigvalsh(cl.cov).min() >= -1e-12 * w[0]


def test_empirical_identical_scores(unit_basis):
    rng = np.random.default_rng(1)
    b = rng.standard_normal(10)
    model = _model(unit_basis, [b], np.full((4, 1), 0.3))
    est = gp_empirical(model, np.linspace(0, 1, 7))
    assert np.abs(est.cov).max() < 1e-12


def test_empirical_two_subjects(unit_basis):
    rng = np.random.default_rng(2)
    b = rng.standard_normal(10)
    model = _model(unit_basis, [b], np.array([[1.3], [-1.3]]), rng.standard_normal(10))
    grid = np.linspace(0, 1, 8)
    mu = predicted_curves(model, grid)
    half = 0.5 * (mu[0] - mu[1])
    est = gp_empirical(model, grid)
    assert np.allclose(est.cov, np.outer(half, half), atol=1e-12)
    assert np.allclose(est.mean, mu.mean(axis=0), atol=1e-12)


def test_empirical_needs_two_subjects(unit_basis):
    model = _model(unit_basis, [np.ones(10)], np.zeros((1, 1)))
    with pytest.raises(DegenerateDesignError):
        gp_empirical(model)


def test_empirical_converges_to_fpc(unit_basis):
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.standard_normal((10, 2)))
    betas = [2.0 * Q[:, 0], 0.8 * Q[:, 1]]
    grid = np.linspace(0, 1, 25)
    errs = {}
    for d in (200, 800, 3200):
        e = []
        for r in range(8):
            scores = np.random.default_rng([d, r]).standard_normal((d, 2))
            model = _model(unit_basis, betas, scores)
            e.append(np.abs(gp_empirical(model, grid).cov - gp_fpc(model, grid).cov).max())
        errs[d] = np.mean(e)
    # error shrinks by about 2 for each fourfold increase in d
    for a, b in ((200, 800), (800, 3200)):
        assert 1.4 < errs[a] / errs[b] < 2.9


def test_invariant_to_relabelling(fitted):
    _, fits = fitted
    m = fits[2]
    b = m.coefs.betas
    flipped = _model(m.basis, [-b[1], b[0]], np.column_stack([-m.scores[:, 1], m.scores[:, 0]]), m.beta0)
    grid = np.linspace(*m.basis.domain, 30)
    for fn in (gp_fpc, gp_empirical):
        a, c = fn(m, grid), fn(flipped, grid)
        assert np.abs(a.cov - c.cov).max() < 1e-10
        assert np.abs(a.mean - c.mean).max() < 1e-10


def test_subgrid_consistency(fitted):
    _, fits = fitted
    m = fits[2]
    fine = np.linspace(*m.basis.domain, 101)
    sub = fine[::10]
    for fn in (gp_fpc, gp_empirical):
        a, b = fn(m, fine), fn(m, sub)
        assert np.array_equal(a.mean[::10], b.mean)
        assert np.array_equal(a.cov[::10, ::10], b.cov)


def test_exports(fitted):
    _, fits = fitted
    est = gp_fpc(fits[2], np.linspace(*fits[2].basis.domain, 4))
    mean_lines = est.mean_csv().splitlines()
    assert mean_lines[0] == "time,mean,sd" and len(mean_lines) == 5
    cov_lines = est.cov_csv().splitlines()
    assert len(cov_lines) == 5 and len(cov_lines[1].split(",")) == 5
    doc = json.loads(est.to_json())
    assert doc["method"] == "fpc" and np.allclose(doc["cov"], est.cov)
