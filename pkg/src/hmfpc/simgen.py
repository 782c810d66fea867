"""Seeded generators for the 2FPC, LMM-RI and SITAR benchmark processes.

Every subject draws from its own counter-based stream keyed by
``(seed, subject index)``, so enlarging ``d`` never changes earlier subjects.
Within a subject the draw order is: random effects, times, noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import _rng
from .data import LongitudinalDataset

DGPS = ("2FPC", "LMM-RI", "SITAR")

DEFAULT_PARAMS = {
    "2FPC": {"sigma": 0.1, "t_max": 3.0 * math.pi},
    "LMM-RI": {"beta0": -1.0, "beta1": 2.0, "sigma_u": 0.5, "sigma": 0.1},
    "SITAR": {
        "h_times": [8.0, 10.0, 12.0, 14.0, 16.0, 18.0],
        "h_values": [128.0, 138.0, 151.0, 160.0, 163.0, 164.0],
        "sd_alpha": 5.0,
        "sd_beta": 0.6,
        "sd_gamma": 0.15,
        "sigma": 0.5,
        "mc_draws": 100000,
        "mc_seed": 8675309,
    },
}


@dataclass(frozen=True)
class SimSpec:
    dgp: str
    d: int
    n_i: int
    seed: int = 0
    dgp_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dgp not in DGPS:
            raise ValueError(f"unknown process {self.dgp!r}; choose from {DGPS}")
        if self.d < 1 or self.n_i < 1:
            raise ValueError("d and n_i must be at least 1")
        unknown = set(self.dgp_params) - set(DEFAULT_PARAMS[self.dgp])
        if unknown:
            raise ValueError(f"unknown parameters for {self.dgp}: {sorted(unknown)}")

    @property
    def params(self) -> dict:
        return {**DEFAULT_PARAMS[self.dgp], **self.dgp_params}

    def to_dict(self) -> dict:
        return {"dgp": self.dgp, "d": self.d, "n_i": self.n_i, "seed": self.seed, "dgp_params": dict(self.dgp_params)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "SimSpec":
        return cls(doc["dgp"], int(doc["d"]), int(doc["n_i"]), int(doc.get("seed", 0)), dict(doc.get("dgp_params", {})))


@dataclass
class SimulatedDataset:
    """Data plus the generating truth.

    ``effects[i]`` holds subject ``i``'s random effects; ``truth(i, t)``
    evaluates its true trajectory and ``true_gp(grid)`` the population mean
    and covariance.
    """

    spec: SimSpec
    data: LongitudinalDataset
    effects: np.ndarray
    domain: tuple

    def truth(self, i: int, t, deriv: int = 0) -> np.ndarray:
        return trajectory(self.spec, self.effects[i], t, deriv)

    def true_gp(self, grid) -> tuple[np.ndarray, np.ndarray]:
        return true_gp(self.spec, grid)


# ---------------------------------------------------------------------------
# 2FPC: mu_i(t) = (1 + u_i1) h(t) + u_i2,  h(t) = t/2 + sin t


def h_2fpc(t, deriv=0):
    t = np.asarray(t, float)
    return 0.5 + np.cos(t) if deriv else 0.5 * t + np.sin(t)


# SITAR: mu_i(t) = alpha_i + h((t - beta_i) exp(gamma_i))


class GrowthCurve:
    """Natural cubic spline through control points, continued linearly outside them."""

    def __init__(self, times, values):
        self.spline = CubicSpline(np.asarray(times, float), np.asarray(values, float), bc_type="natural")
        self.lo, self.hi = float(times[0]), float(times[-1])

    def __call__(self, x, deriv: int = 0):
        x = np.asarray(x, float)
        inside = self.spline(np.clip(x, self.lo, self.hi), deriv)
        if deriv > 1:
            return np.where((x < self.lo) | (x > self.hi), 0.0, inside)
        out = inside
        for edge in (self.lo, self.hi):
            slope = self.spline(edge, 1)
            outside = (x < edge) if edge == self.lo else (x > edge)
            ext = slope if deriv else self.spline(edge) + slope * (x - edge)
            out = np.where(outside, ext, out)
        return out


def _curve(params) -> GrowthCurve:
    return GrowthCurve(params["h_times"], params["h_values"])


def trajectory(spec: SimSpec, effects, t, deriv: int = 0) -> np.ndarray:
    """True ``mu_i(t)`` (or ``mu_i'(t)``) for one subject's random effects."""
    p = spec.params
    t = np.asarray(t, float)
    if spec.dgp == "2FPC":
        u1, u2 = effects
        return (1.0 + u1) * h_2fpc(t, deriv) + (0.0 if deriv else u2)
    if spec.dgp == "LMM-RI":
        (u0,) = effects
        if deriv:
            return np.full_like(t, p["beta1"])
        return p["beta0"] + p["beta1"] * t + u0
    a, b, g = effects
    h = _curve(p)
    s = math.exp(g)
    x = (t - b) * s
    return h(x, 1) * s if deriv else a + h(x)


def _times(spec: SimSpec, rng) -> np.ndarray:
    n = spec.n_i
    if spec.dgp == "2FPC":
        return np.sort(rng.uniform(0.0, spec.params["t_max"], n))
    if spec.dgp == "LMM-RI":
        return np.sort(rng.uniform(0.0, 1.0, n))
    p = spec.params
    lo, hi = p["h_times"][0], p["h_times"][-1]
    step = (hi - lo) / n
    return rng.uniform(lo, lo + step) + step * np.arange(n)


def _effects(spec: SimSpec, rng) -> np.ndarray:
    p = spec.params
    if spec.dgp == "2FPC":
        return rng.standard_normal(2)
    if spec.dgp == "LMM-RI":
        return np.array([p["sigma_u"] * rng.standard_normal()])
    z = rng.standard_normal(3)
    return z * np.array([p["sd_alpha"], p["sd_beta"], p["sd_gamma"]])


def domain(spec: SimSpec) -> tuple:
    if spec.dgp == "2FPC":
        return 0.0, spec.params["t_max"]
    if spec.dgp == "LMM-RI":
        return 0.0, 1.0
    return spec.params["h_times"][0], spec.params["h_times"][-1]


def generate(spec: SimSpec) -> SimulatedDataset:
    """Simulate ``spec.d`` subjects with ``spec.n_i`` observations each."""
    sigma = spec.params["sigma"]
    times, values, effects = [], [], []
    for i in range(spec.d):
        rng = _rng.stream(spec.seed, i)
        eff = _effects(spec, rng)
        t = _times(spec, rng)
        y = trajectory(spec, eff, t) + sigma * rng.standard_normal(spec.n_i)
        times.append(t)
        values.append(y)
        effects.append(eff)
    data = LongitudinalDataset.from_arrays(times, values)
    return SimulatedDataset(spec, data, np.array(effects), domain(spec))


def gen_2fpc(spec: SimSpec) -> SimulatedDataset:
    if spec.dgp != "2FPC":
        raise ValueError("spec is not a 2FPC spec")
    return generate(spec)


def gen_lmm_ri(spec: SimSpec) -> SimulatedDataset:
    if spec.dgp != "LMM-RI":
        raise ValueError("spec is not an LMM-RI spec")
    return generate(spec)


def gen_sitar(spec: SimSpec) -> SimulatedDataset:
    if spec.dgp != "SITAR":
        raise ValueError("spec is not a SITAR spec")
    return generate(spec)


_MC_CACHE: dict = {}


def true_gp(spec: SimSpec, grid) -> tuple[np.ndarray, np.ndarray]:
    """True population mean and covariance on ``grid``.

    Closed form for 2FPC and LMM-RI; for SITAR a Monte-Carlo average over
    ``mc_draws`` random-effect draws from a fixed seed (divisor = draws).
    """
    grid = np.asarray(grid, float)
    p = spec.params
    if spec.dgp == "2FPC":
        h = h_2fpc(grid)
        return h.copy(), np.outer(h, h) + 1.0
    if spec.dgp == "LMM-RI":
        return p["beta0"] + p["beta1"] * grid, np.full((len(grid), len(grid)), p["sigma_u"] ** 2)
    key = (json.dumps(p, sort_keys=True), grid.tobytes())
    if key not in _MC_CACHE:
        _MC_CACHE.clear()
        _MC_CACHE[key] = _sitar_mc(p, grid)
    m, C = _MC_CACHE[key]
    return m.copy(), C.copy()


def _sitar_mc(p, grid, chunk=10000):
    rng = _rng.stream(p["mc_seed"])
    n = int(p["mc_draws"])
    h = _curve(p)
    sd = np.array([p["sd_alpha"], p["sd_beta"], p["sd_gamma"]])
    draws = []
    for start in range(0, n, chunk):
        z = rng.standard_normal((min(chunk, n - start), 3)) * sd
        V = z[:, :1] + h((grid[None, :] - z[:, 1:2]) * np.exp(z[:, 2:3]))
        draws.append(V)
    V = np.concatenate(draws)
    m = V.mean(axis=0)
    R = V - m
    C = R.T @ R / n
    return m, 0.5 * (C + C.T)
