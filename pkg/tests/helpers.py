"""Shared constructors for tests."""

import math

import numpy as np

from hmfpc.data import LongitudinalDataset


def random_dataset(rng, d, n_max, t_range=(0.0, 1.0)):
    times, values = [], []
    for _ in range(d):
        n = int(rng.integers(1, n_max + 1))
        t = np.sort(rng.uniform(*t_range, n))
        times.append(t)
        values.append(np.sin(3 * t) + rng.normal(0, 0.5) + 0.2 * rng.standard_normal(n))
    times[0] = np.r_[t_range[0], times[0]]
    values[0] = np.r_[0.0, values[0]]
    times[-1] = np.r_[times[-1], t_range[1]]
    values[-1] = np.r_[values[-1], 1.0]
    return LongitudinalDataset.from_arrays(times, values)


def random_params(rng, n_basis, K, scale=0.5, log_sigma=None):
    from hmfpc.orthoparam import ParamVector

    return ParamVector(
        rng.standard_normal(n_basis),
        [scale * rng.standard_normal(n_basis - k + 1) for k in range(1, K + 1)],
        rng.uniform(-1.5, 0.0) if log_sigma is None else log_sigma,
    )


def dense_loglik(params, data, basis):
    """Gaussian log-density with each subject's covariance formed explicitly and Cholesky-factored."""
    from scipy.linalg import cho_factor, cho_solve

    from hmfpc.basis import eval_basis
    from hmfpc.orthoparam import expand

    B = expand(params).matrix(basis.n_basis)
    terms = []
    for t, y in zip(data.times, data.values):
        X = eval_basis(basis, t)
        F = X @ B
        cov = params.sigma2 * np.eye(len(t)) + F @ F.T
        c = cho_factor(cov, lower=True)
        r = y - X @ params.beta0
        terms += [-0.5 * len(t) * math.log(2 * math.pi), *(-np.log(np.diag(c[0]))), *(-0.5 * r * cho_solve(c, r))]
    return math.fsum(terms)


def central_differences(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gaussian_cloud(rng, m, C, n):
    """``n`` antithetic draws from N(m, C) whose sample covariance is exactly C."""
    w, V = np.linalg.eigh(C)
    w = np.clip(w, 0.0, None)
    keep = w > 1e-12 * w.max()
    Z = rng.standard_normal((n // 2, int(keep.sum())))
    Z = np.vstack([Z, -Z])
    L = np.linalg.cholesky(Z.T @ Z / n)
    Z = Z @ np.linalg.inv(L).T
    return m + Z @ (V[:, keep] * np.sqrt(w[keep])).T


def monte_carlo_w2(rng, m1, C1, m2, C2, n=10_000, batch=500):
    """Squared 2-Wasserstein distance by exact discrete OT between sample clouds, in batches."""
    from scipy.optimize import linear_sum_assignment

    X = gaussian_cloud(rng, m1, C1, n)[rng.permutation(n)]
    Y = gaussian_cloud(rng, m2, C2, n)[rng.permutation(n)]
    total = 0.0
    for s in range(0, n, batch):
        a, b = X[s : s + batch], Y[s : s + batch]
        D = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        r, c = linear_sum_assignment(D)
        total += D[r, c].sum()
    return total / n


def low_rank_pair(rng, N=10):
    A, B = rng.standard_normal((N, 2)), rng.standard_normal((N, 3))
    return 0.3 * rng.standard_normal(N), A @ A.T, 0.3 * rng.standard_normal(N), B @ B.T


# filled by the acceptance tests, printed by the terminal-summary hook
ACCEPTANCE_LINES = []


def dense_loglik_mp(params, data, basis, dps=30):
    """``dense_loglik`` in ``dps``-digit arithmetic, for comparisons at the 1e-10 level.

    The float64 dense route loses ``cond(Sigma) * eps`` relative accuracy in
    the quadratic form, which on badly conditioned instances is more than
    the error of the low-rank route under test.
    """
    import mpmath as mp

    from hmfpc.basis import eval_basis
    from hmfpc.orthoparam import expand

    B = expand(params).matrix(basis.n_basis)
    with mp.workdps(dps):
        total = mp.mpf(0)
        for t, y in zip(data.times, data.values):
            X = eval_basis(basis, t)
            Xm, Bm = mp.matrix(X.tolist()), mp.matrix(B.tolist()) if B.size else None
            r = mp.matrix(y.tolist()) - Xm * mp.matrix(params.beta0.tolist())
            cov = mp.mpf(params.sigma2) * mp.eye(len(t))
            if Bm is not None:
                F = Xm * Bm
                cov += F * F.T
            L = mp.cholesky(cov)
            z = mp.lu_solve(L, r)
            logdet = 2 * mp.fsum(mp.log(L[k, k]) for k in range(len(t)))
            total += -(len(t) * mp.log(2 * mp.pi) + logdet + mp.fsum(v * v for v in z)) / 2
        return float(total)
