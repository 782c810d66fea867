"""Quasi-Newton minimisation with a strong-Wolfe line search.

The line search treats a non-finite objective as "too far" and backs off,
which keeps the iterates away from overflowing ``sigma`` or singular
capacitance matrices without special cases in the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteObjectiveError

GTOL = 1e-6
MAX_ITER = 500


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    message: str


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating two points with slopes, or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    den = db - da + 2.0 * d2
    if den == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / den


def line_search(fg, x, f0, g0, p, alpha0=1.0, c1=1e-4, c2=0.9, max_eval=40, f_tol=1e-11):
    """Step length satisfying the strong Wolfe conditions along ``p``.

    Near an optimum of a stiff objective the achievable decrease can fall
    below the rounding error of ``f``.  Changes in ``f`` smaller than
    ``f_tol * max(1, |f0|)`` are therefore treated as ties and the bracket
    is driven by the directional derivative alone (an approximate-Wolfe
    acceptance).

    Returns ``(alpha, f, g, n_eval)``; ``alpha`` is None on failure.
    """
    dphi0 = float(g0 @ p)
    eps = f_tol * max(1.0, abs(f0))
    n_eval = 0

    def phi(a):
        nonlocal n_eval
        n_eval += 1
        f, g = fg(x + a * p)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            return math.inf, None, math.nan
        return f, g, float(g @ p)

    def too_far(a, f, f_lo):
        return f > f0 + c1 * a * dphi0 + eps or f > f_lo + eps

    def zoom(lo, flo, dlo, glo, hi, fhi, dhi):
        while n_eval < max_eval:
            width = hi - lo
            a = None
            if math.isfinite(fhi) and math.isfinite(dhi):
                a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not (lo_b <= a <= hi_b):
                a = lo + 0.5 * width
            f, g, d = phi(a)
            if too_far(a, f, flo):
                hi, fhi, dhi = a, f, d
            else:
                if abs(d) <= -c2 * dphi0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo, glo = a, f, d, g
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        # an Armijo point is still progress
        if lo > 0 and flo <= f0:
            return lo, flo, glo
        return None, f0, g0

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, dphi0, g0
    a = alpha0
    while n_eval < max_eval:
        f, g, d = phi(a)
        if too_far(a, f, f_prev) or (f > f0 + c1 * a * dphi0 and d > 0):
            a, f, g = zoom(a_prev, f_prev, d_prev, g_prev, a, f, d)
            return a, f, g, n_eval
        if abs(d) <= -c2 * dphi0:
            return a, f, g, n_eval
        if d >= 0:
            a, f, g = zoom(a, f, d, g, a_prev, f_prev, d_prev)
            return a, f, g, n_eval
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a *= 2.0
    return (a_prev if a_prev > 0 else None), f_prev, g_prev, n_eval


def minimize_bfgs(fg, x0, gtol: float = GTOL, max_iter: int = MAX_ITER, inv_hess0=None) -> OptimResult:
    """Minimise ``f`` given ``fg(x) -> (f, grad)``.

    Convergence: ``max|grad| <= gtol * max(1, |f|)``.  The inverse Hessian
    approximation starts from ``inv_hess0(x)`` when given, otherwise from
    ``(y's / y'y) I`` after a first steepest-descent step.  Updates with
    ``y's <= 0`` are skipped; a failed line search resets the approximation.
    """
    x = np.array(x0, float)
    f, g = fg(x)
    n_eval = 1
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjectiveError("objective is not finite at the starting point")
    n = len(x)
    seeded = inv_hess0 is not None
    reset_once = False
    H = inv_hess0(x) if seeded else None
    for it in range(max_iter):
        if np.max(np.abs(g), initial=0.0) <= gtol * max(1.0, abs(f)):
            return OptimResult(x, f, g, it, n_eval, True, "gradient tolerance reached")
        if H is None:
            p = -g
            alpha0 = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        else:
            p = -H @ g
            alpha0 = 1.0
            if not g @ p < 0:
                H, p = None, -g
                alpha0 = min(1.0, 1.0 / np.max(np.abs(g)))
        a, f_new, g_new, ne = line_search(fg, x, f, g, p, alpha0)
        n_eval += ne
        if a is None:
            if H is None:
                return OptimResult(x, f, g, it, n_eval, False, "line search failed")
            if seeded and not reset_once:
                H = inv_hess0(x)
                reset_once = True
            else:
                H = None
            continue
        reset_once = False
        s = a * p
        y = g_new - g
        x, f, g = x + s, f_new, g_new
        ys = float(y @ s)
        if ys > 1e-12 * np.linalg.norm(y) * np.linalg.norm(s):
            if H is None:
                H = (ys / float(y @ y)) * np.eye(n)
            rho = 1.0 / ys
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
    converged = np.max(np.abs(g), initial=0.0) <= gtol * max(1.0, abs(f))
    return OptimResult(x, f, g, max_iter, n_eval, bool(converged), "iteration limit reached")
