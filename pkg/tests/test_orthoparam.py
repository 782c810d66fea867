import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmfpc.basis import gram_matrix
from hmfpc.errors import NonDifferentiableError
from hmfpc.orthoparam import (
    OrthoCoefs,
    ParamVector,
    alphas_from_betas,
    check_rank,
    expand,
    infer_K,
    normalize_fit,
    null_space,
    param_dim,
)


def random_params(rng, n_basis, K, scale=1.0):
    return ParamVector(
        rng.standard_normal(n_basis),
        [scale * rng.standard_normal(n_basis - k + 1) for k in range(1, K + 1)],
        rng.normal(),
    )


def max_offdiag(coefs):
    B = coefs.matrix()
    G = B.T @ B
    return np.abs(G - np.diag(np.diag(G))).max() if coefs.K > 1 else 0.0


def test_parameter_dimension():
    assert param_dim(10, 0) == 11
    assert param_dim(10, 3) == 10 + 10 + 9 + 8 + 1
    assert infer_K(param_dim(7, 4), 7) == 4
    with pytest.raises(ValueError):
        ParamVector(np.zeros(5), [np.zeros(4)], 0.0)
    p = random_params(np.random.default_rng(0), 6, 3)
    assert np.array_equal(ParamVector.from_array(p.to_array(), 6).to_array(), p.to_array())


def test_first_component_is_identity():
    e3 = np.eye(6)[2]
    coefs = expand(ParamVector(np.zeros(6), [e3], 0.0))
    assert np.array_equal(coefs.betas[0], e3)


def test_second_component_orthogonal_to_first_axis():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = ParamVector(np.zeros(4), [np.eye(4)[0], rng.standard_normal(3)], 0.0)
        coefs = expand(p)
        assert abs(coefs.betas[0] @ coefs.betas[1]) < 1e-14
        assert coefs.betas[1][0] == pytest.approx(0.0, abs=1e-14)


def test_orthogonality_k4_nb10():
    rng = np.random.default_rng(4)
    worst = max(max_offdiag(expand(random_params(rng, 10, 4))) for _ in range(500))
    assert worst < 1e-10


@settings(max_examples=60, deadline=None)
@given(n_basis=st.integers(2, 20), K=st.integers(1, 5), seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
def test_orthogonality_property(n_basis, K, seed, scale):
    K = min(K, n_basis)
    coefs = expand(random_params(np.random.default_rng(seed), n_basis, K, scale))
    assert max_offdiag(coefs) < 1e-10 * max(1.0, scale**2)


def test_null_space_columns():
    rng = np.random.default_rng(6)
    for k in range(1, 5):
        B = rng.standard_normal((9, k))
        T = null_space(B)
        assert T.shape == (9, 9 - k)
        assert np.allclose(T.T @ T, np.eye(9 - k), atol=1e-13)
        assert np.abs(T.T @ B).max() < 1e-13


def test_s_matrices_are_projected_penalties(unit_basis):
    p = random_params(np.random.default_rng(9), 10, 3)
    coefs = expand(p, unit_basis.penalty)
    for T, Sk in zip(coefs.t_matrices, coefs.s_matrices):
        assert np.allclose(Sk, T.T @ unit_basis.penalty @ T)
    assert np.array_equal(coefs.t_matrices[0], np.eye(10))


def test_surjectivity_round_trip():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n, K = 8, int(rng.integers(1, 6))
        Q, _ = np.linalg.qr(rng.standard_normal((n, K)))
        betas = [Q[:, k] * rng.uniform(0.1, 3) for k in range(K)]
        alphas = alphas_from_betas(betas, n)
        back = expand(ParamVector(np.zeros(n), alphas, 0.0)).betas
        for b, c in zip(betas, back):
            assert np.abs(b - c).max() < 1e-9 or np.abs(b + c).max() < 1e-9


def test_expand_is_bit_deterministic():
    p = random_params(np.random.default_rng(1), 10, 4)
    a, b = expand(p), expand(ParamVector.from_array(p.to_array(), 10))
    assert all(np.array_equal(x, y) for x, y in zip(a.betas, b.betas))


def test_lambdas_match_quadrature(unit_basis):
    coefs = expand(random_params(np.random.default_rng(2), 10, 3))
    G = gram_matrix(unit_basis)
    for b, lam in zip(coefs.betas, coefs.lambdas):
        assert b @ G @ b == pytest.approx(lam, rel=1e-8)


def test_rank_deficiency_detected():
    p = ParamVector(np.zeros(5), [np.zeros(5), np.ones(4)], 0.0)
    with pytest.raises(NonDifferentiableError):
        check_rank(p)
    # the identity reflector keeps the later component finite
    assert np.all(np.isfinite(expand(p).betas[1]))


def test_normalize_unchanged_when_ordered():
    c = np.ones(3)
    coefs = OrthoCoefs([np.array([2.0, 0, 0]), np.array([0, 1.0, 0])])
    out, order, signs = normalize_fit(coefs, c)
    assert list(order) == [0, 1] and list(signs) == [1, 1]
    assert np.array_equal(out.betas[0], coefs.betas[0])


def test_normalize_flips_negative_integral():
    coefs = OrthoCoefs([np.array([2.0, 0, 0]), np.array([0, -1.0, 0])])
    out, _, signs = normalize_fit(coefs, np.ones(3))
    assert list(signs) == [1, -1]
    assert np.array_equal(out.betas[1], np.array([0, 1.0, 0]))
    assert np.allclose(out.lambdas, coefs.lambdas)


def test_normalize_restores_order():
    coefs = OrthoCoefs([np.array([0, 1.0, 0]), np.array([3.0, 0, 0])])
    out, order, _ = normalize_fit(coefs, np.ones(3), np.eye(3))
    assert list(order) == [1, 0]
    assert out.lambdas[0] >= out.lambdas[1]
    assert len(out.s_matrices) == 2
