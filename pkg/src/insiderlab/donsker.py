"""Closed-form conditional density kernel for first-chaos Gaussian inside information.

The information variable is Z = integral of beta(s) dB(s) over [0, t0] with
deterministic beta.  Conditioning on the path up to t leaves a Gaussian
kernel in z centered at Z(t) with variance equal to the remaining quadratic
mass of beta; its pathwise derivative in the Brownian direction at t is the
kernel times (z - Z(t)) * beta(t) / variance.  Both are exact martingales of
the discretized path because Z and the variance tail are built from the same
partial sums of beta^2 * dt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .paths import BrownianPath, TimeGrid

__all__ = [
    "GaussianInsiderSpec",
    "KernelValue",
    "information_state",
    "information_path",
    "conditional_density",
    "conditional_derivative",
    "kernel_value",
    "information_drift",
    "pair_expectation_quadrature",
    "kernel_paths",
]

_HERMITE_NODES = 96


@dataclass(frozen=True)
class GaussianInsiderSpec:
    """First-chaos Gaussian information variable: integrand beta and horizon t0."""

    beta: Callable[[float], float] | float
    t0: float

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValueError("information horizon must be positive")

    def beta_at(self, t: float) -> float:
        return float(self.beta) if not callable(self.beta) else float(self.beta(t))


@dataclass(frozen=True)
class KernelValue:
    """Conditional kernel density and its Brownian-direction derivative at one point."""

    density: float
    derivative: float


@lru_cache(maxsize=128)
def _profile(spec: GaussianInsiderSpec, grid: TimeGrid):
    """Per-grid cache: beta at left endpoints and exact tail sums of beta^2*dt.

    tail[k] = sum_{j=k}^{k0-1} beta_j^2 dt, where k0 is the index of t0.
    """
    k0 = grid.index_of(spec.t0)
    tt = grid.times
    if callable(spec.beta):
        beta = np.array([spec.beta(t) for t in tt[:-1]], dtype=float)
    else:
        beta = np.full(grid.n_steps, float(spec.beta))
    sq = beta[:k0] ** 2 * grid.dt
    tail = np.zeros(k0 + 1)
    tail[:k0] = np.cumsum(sq[::-1])[::-1]
    return k0, beta, tail


def _checked_index(spec: GaussianInsiderSpec, grid: TimeGrid, t: float) -> tuple[int, int, np.ndarray, np.ndarray]:
    k0, beta, tail = _profile(spec, grid)
    k = grid.index_of(t)
    if k >= k0 - 1:
        raise ValueError(
            f"time {t!r} is within one grid step of the information horizon {spec.t0!r}; "
            "the kernel degenerates there"
        )
    if tail[k] <= 0.0:
        raise ValueError("residual variance of the information integrand is not positive")
    return k, k0, beta, tail


def information_path(spec: GaussianInsiderSpec, path: BrownianPath) -> np.ndarray:
    """Z(t_k) for every grid index up to t0, as left-endpoint sums of beta dB."""
    k0, beta, _ = _profile(spec, path.grid)
    incr = path.increments[..., :k0]
    z = np.zeros(path.values[..., : k0 + 1].shape)
    np.cumsum(beta[:k0] * incr, axis=-1, out=z[..., 1:])
    return z


def information_state(spec: GaussianInsiderSpec, path: BrownianPath, t: float):
    """Z(t): left-endpoint stochastic sum of beta dB up to a grid time t <= t0."""
    k0, beta, _ = _profile(spec, path.grid)
    k = path.grid.index_of(t)
    if k > k0:
        raise ValueError("t beyond the information horizon")
    if k == 0:
        return np.zeros(path.values[..., 0].shape) if path.values.ndim > 1 else 0.0
    val = np.sum(beta[:k] * path.increments[..., :k], axis=-1)
    return val if path.values.ndim > 1 else float(val)


def _gauss(x, var):
    return np.exp(-(x * x) / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)


def conditional_density(spec: GaussianInsiderSpec, z: float, t: float, path: BrownianPath):
    """Value at z of the conditional kernel density given the path up to t."""
    k, _, _, tail = _checked_index(spec, path.grid, t)
    zt = information_state(spec, path, t)
    out = _gauss(np.asarray(zt) - z, tail[k])
    return out if path.values.ndim > 1 else float(out)


def conditional_derivative(spec: GaussianInsiderSpec, z: float, t: float, path: BrownianPath):
    """Brownian-direction derivative of the conditional kernel at (z, t)."""
    k, _, beta, tail = _checked_index(spec, path.grid, t)
    zt = np.asarray(information_state(spec, path, t))
    out = -_gauss(zt - z, tail[k]) * (zt - z) / tail[k] * beta[k]
    return out if path.values.ndim > 1 else float(out)


def kernel_value(spec: GaussianInsiderSpec, z: float, t: float, path: BrownianPath) -> KernelValue:
    return KernelValue(
        conditional_density(spec, z, t, path),
        conditional_derivative(spec, z, t, path),
    )


def kernel_paths(spec: GaussianInsiderSpec, path: BrownianPath, z: float, n_end: int):
    """Density and derivative arrays along the grid, indices 0..n_end inclusive.

    Vectorized helper for Monte Carlo sweeps; enforces the same horizon guard
    as the pointwise operations.
    """
    k0, beta, tail = _profile(spec, path.grid)
    if n_end >= k0 - 1:
        raise ValueError("n_end too close to the information horizon")
    zpath = information_path(spec, path)[..., : n_end + 1]
    v = tail[: n_end + 1]
    dev = zpath - z
    dens = np.exp(-(dev * dev) / (2.0 * v)) / np.sqrt(2.0 * math.pi * v)
    deriv = -dens * dev / v * beta[: n_end + 1]
    return dens, deriv


def information_drift(spec: GaussianInsiderSpec, t: float, path: BrownianPath):
    """Extra drift rate the insider sees at t: beta(t) * (Z(t0) - Z(t)) / tail variance.

    Anticipating quantity; the path must extend to t0.
    """
    k, k0, beta, tail = _checked_index(spec, path.grid, t)
    z_end = information_state(spec, path, spec.t0)
    z_t = information_state(spec, path, t)
    out = beta[k] * (np.asarray(z_end) - z_t) / tail[k]
    return out if path.values.ndim > 1 else float(out)


def pair_expectation_quadrature(spec: GaussianInsiderSpec, h: Callable, z: float,
                                t: float, path: BrownianPath, t_end: float) -> float:
    """E[h(B(t_end)) * kernel(t_end, z) | path up to t] for constant beta.

    The Gaussian increment of B and the kernel fold into a single Gaussian
    factor times a reweighted expectation of h, which is then evaluated by
    Gauss-Hermite quadrature; for smooth bounded h the quadrature error is
    far below 1e-8 relative.
    """
    k0, beta, tail = _profile(spec, path.grid)
    if np.ptp(beta) > 1e-12 * max(1.0, float(np.max(np.abs(beta)))):
        raise ValueError("closed-form pairing needs a constant information integrand")
    k = path.grid.index_of(t)
    k_end = path.grid.index_of(t_end)
    if not (k <= k_end < k0):
        raise ValueError("need t <= t_end < t0")
    v = tail[k_end]
    if v <= 0.0:
        raise ValueError("residual variance at t_end is not positive")
    b_const = float(beta[0])
    bt = path.values[..., k]
    if np.ndim(bt) != 0:
        raise ValueError("pairing expects a single path")
    span = (k_end - k) * path.grid.dt
    a = float(information_state(spec, path, t))
    c = b_const * math.sqrt(span) if span > 0 else 0.0
    total_var = v + c * c
    factor = float(_gauss(np.asarray(a - z), total_var))
    if span == 0.0:
        return factor * float(h(np.asarray(float(bt))))
    m_star = c * (z - a) / total_var
    s_star = math.sqrt(v / total_var)
    x, w = np.polynomial.hermite.hermgauss(_HERMITE_NODES)
    nodes = float(bt) + math.sqrt(span) * (m_star + math.sqrt(2.0) * s_star * x)
    hw = np.asarray(h(nodes), dtype=float)
    if not np.all(np.isfinite(hw)):
        raise ValueError("payoff is not integrable on the quadrature range")
    return factor * float(np.sum(w * hw) / math.sqrt(math.pi))
