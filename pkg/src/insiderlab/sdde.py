"""Euler-Maruyama simulation of controlled stochastic delay equations.

State dynamics depend on the current value x, the lagged value y = X(t - delay)
and a control u; the delay is an exact number of grid steps, so lagged reads
are index shifts into the stored history.  All stochastic sums use
left-endpoint coefficient evaluation, which is also the discretization of the
anticipating (forward) integral when the control reads the future of the
driving path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .paths import BrownianPath, JumpPath, TimeGrid

__all__ = [
    "ModelCoefficients",
    "ControlPolicy",
    "SegmentedState",
    "VariationalState",
    "simulate_sdde",
    "first_hit_zero",
    "simulate_variational",
    "forward_integral_epsilon",
]

_FD_REL = 1e-6
_FD_ABS = 1e-9

_ARG_INDEX = {"x": 1, "y": 2, "u": 3}


@dataclass(frozen=True, eq=False)
class ModelCoefficients:
    """Drift b(t,x,y,u,z), diffusion sigma(t,x,y,u,z), optional jump coefficient
    gamma(t,x,y,u,z,zeta), running profit f(t,x,u,z) and terminal payoff g(x,z).

    All callables must accept numpy arrays in the state/control slots.
    Analytic partial derivatives can be supplied in `partials` keyed like
    "b_x", "sigma_y", "gamma_u", "f_u", "g_x"; anything missing falls back to
    central finite differences with relative step 1e-6 (absolute floor 1e-9).
    """

    b: Callable
    sigma: Callable
    gamma: Callable | None = None
    f: Callable | None = None
    g: Callable | None = None
    partials: dict = field(default_factory=dict)

    def partial(self, name: str, wrt: str) -> Callable:
        key = f"{name}_{wrt}"
        if key in self.partials:
            return self.partials[key]
        base = getattr(self, name)
        if base is None:
            raise ValueError(f"coefficient {name!r} is not defined")
        if name == "g":
            if wrt != "x":
                raise ValueError("terminal payoff differentiates in x only")

            def dg(x, z):
                h = np.maximum(_FD_REL * np.abs(x), _FD_ABS)
                return (base(x + h, z) - base(x - h, z)) / (2.0 * h)

            return dg
        if name == "f":
            pos = {"x": 1, "u": 2}[wrt]
        else:
            pos = _ARG_INDEX[wrt]

        def d(*args):
            args = list(args)
            v = np.asarray(args[pos], dtype=float)
            h = np.maximum(_FD_REL * np.abs(v), _FD_ABS)
            up = list(args)
            dn = list(args)
            up[pos] = v + h
            dn[pos] = v - h
            return (base(*up) - base(*dn)) / (2.0 * h)

        return d


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Control evaluation contract: value(t, x, y, path, z) -> control.

    Non-anticipating policies must only read `path` up to t; anticipating
    policies (flag set) may read the whole driving path.
    """

    value: Callable
    anticipating: bool = False


@dataclass(frozen=True, eq=False)
class SegmentedState:
    """Simulated state on [0, t_end] plus its initial segment on [-delay, 0].

    `history[j]` holds the initial segment at -delay + j*dt (j = 0..m), and the
    lagged read at index k is values[k-m] for k >= m, history[k] otherwise.
    """

    grid: TimeGrid
    t_end: float
    delay: float
    values: np.ndarray
    history: np.ndarray
    controls: np.ndarray | None = None
    z: float = 0.0

    @property
    def n_index(self) -> int:
        return self.grid.index_of(self.t_end)

    @property
    def delay_steps(self) -> int:
        return self.grid.steps_in(self.delay)

    def value_at(self, t: float):
        return self.values[..., self.grid.index_of(t)]

    def delayed(self, k: int):
        m = self.delay_steps
        return self.values[..., k - m] if k >= m else self.history[k]

    def delayed_at(self, t: float):
        return self.delayed(self.grid.index_of(t))


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Pathwise derivative of the state in a control-perturbation direction."""

    grid: TimeGrid
    t_end: float
    delay: float
    values: np.ndarray

    def delayed(self, k: int):
        m = self.grid.steps_in(self.delay)
        if k >= m:
            return self.values[..., k - m]
        return np.zeros_like(self.values[..., 0])


def _history_array(history, delay: float, grid: TimeGrid) -> np.ndarray:
    m = grid.steps_in(delay)
    if callable(history):
        return np.array([float(history(-delay + j * grid.dt)) for j in range(m + 1)])
    return np.full(m + 1, float(history))


def _jump_step_data(jumps: JumpPath | None):
    if jumps is None:
        return None
    return jumps.step_indices()


def simulate_sdde(coeffs: ModelCoefficients, policy: ControlPolicy, z: float,
                  brownian: BrownianPath, delay: float, history,
                  jumps: JumpPath | None = None, t_end: float | None = None) -> SegmentedState:
    """Explicit Euler scheme for the controlled delay equation.

    Left-endpoint coefficient evaluation throughout; compound Poisson jumps are
    compensated per step against the quadrature stored on the jump path.
    """
    grid = brownian.grid
    if t_end is None:
        t_end = grid.t_end
    n = grid.index_of(t_end)
    m = grid.steps_in(delay)
    dt = grid.dt
    tt = grid.times
    hist = _history_array(history, delay, grid)
    batch = brownian.values.ndim > 1
    if jumps is not None and batch:
        raise ValueError("jump paths are supported for single-path simulation only")
    shape = (brownian.values.shape[0], n + 1) if batch else (n + 1,)
    x = np.empty(shape)
    u_store = np.empty(shape[:-1] + (n,))
    x[..., 0] = hist[m]
    incr = brownian.increments
    jump_steps = _jump_step_data(jumps)
    for k in range(n):
        xk = x[..., k]
        yk = x[..., k - m] if k >= m else np.broadcast_to(hist[k], xk.shape) if batch else hist[k]
        uk = policy.value(tt[k], xk, yk, brownian, z)
        u_store[..., k] = uk
        bk = coeffs.b(tt[k], xk, yk, uk, z)
        sk = coeffs.sigma(tt[k], xk, yk, uk, z)
        if not (np.all(np.isfinite(bk)) and np.all(np.isfinite(sk))):
            raise ValueError(f"coefficient evaluation is not finite at step {k}")
        xn = xk + np.asarray(bk) * dt + np.asarray(sk) * incr[..., k]
        if jumps is not None and coeffs.gamma is not None:
            sel = jump_steps == k
            if np.any(sel):
                xn = xn + np.sum(coeffs.gamma(tt[k], xk, yk, uk, z, jumps.marks[sel]))
            comp = np.sum(coeffs.gamma(tt[k], xk, yk, uk, z, jumps.nu_nodes) * jumps.nu_weights)
            xn = xn - comp * dt
        x[..., k + 1] = xn
    return SegmentedState(grid, t_end, delay, x, hist, u_store, z)


def first_hit_zero(state: SegmentedState):
    """First grid time with X <= 0, or None (NaN entries in the batch case)."""
    hit = state.values <= 0.0
    tt = state.grid.times
    if state.values.ndim == 1:
        idx = np.argmax(hit) if hit.any() else -1
        return float(tt[idx]) if idx >= 0 else None
    out = np.full(state.values.shape[0], np.nan)
    any_hit = hit.any(axis=-1)
    out[any_hit] = tt[np.argmax(hit[any_hit], axis=-1)]
    return out


def simulate_variational(coeffs: ModelCoefficients, perturbation: Callable,
                         base: SegmentedState, brownian: BrownianPath, z: float,
                         jumps: JumpPath | None = None) -> VariationalState:
    """Euler scheme for the derivative process of the state in direction `perturbation`.

    `perturbation(t, u, z)` is evaluated along the base controls; the derivative
    process is zero on the initial segment.
    """
    if base.controls is None:
        raise ValueError("base state was simulated without stored controls")
    grid = brownian.grid
    n = base.n_index
    m = base.delay_steps
    dt = grid.dt
    tt = grid.times
    incr = brownian.increments
    chi = np.zeros(base.values.shape[:-1] + (n + 1,))
    b_x = coeffs.partial("b", "x")
    b_y = coeffs.partial("b", "y")
    b_u = coeffs.partial("b", "u")
    s_x = coeffs.partial("sigma", "x")
    s_y = coeffs.partial("sigma", "y")
    s_u = coeffs.partial("sigma", "u")
    jump_steps = _jump_step_data(jumps)
    for k in range(n):
        xk = base.values[..., k]
        yk = base.delayed(k)
        uk = base.controls[..., k]
        ck = chi[..., k]
        cdk = chi[..., k - m] if k >= m else 0.0
        beta_k = perturbation(tt[k], uk, z)
        args = (tt[k], xk, yk, uk, z)
        drift = b_x(*args) * ck + b_y(*args) * cdk + b_u(*args) * beta_k
        diff = s_x(*args) * ck + s_y(*args) * cdk + s_u(*args) * beta_k
        if not np.all(np.isfinite(drift)) or not np.all(np.isfinite(diff)):
            raise ValueError(f"derivative evaluation failed at step {k}")
        nxt = ck + drift * dt + diff * incr[..., k]
        if jumps is not None and coeffs.gamma is not None:
            g_x = coeffs.partial("gamma", "x")
            g_y = coeffs.partial("gamma", "y")
            g_u = coeffs.partial("gamma", "u")
            sel = jump_steps == k
            for zeta in jumps.marks[sel]:
                jargs = (tt[k], xk, yk, uk, z, zeta)
                nxt = nxt + g_x(*jargs) * ck + g_y(*jargs) * cdk + g_u(*jargs) * beta_k
            comp = 0.0
            for zeta, w in zip(jumps.nu_nodes, jumps.nu_weights):
                jargs = (tt[k], xk, yk, uk, z, zeta)
                comp = comp + (g_x(*jargs) * ck + g_y(*jargs) * cdk + g_u(*jargs) * beta_k) * w
            nxt = nxt - comp * dt
        chi[..., k + 1] = nxt
    return VariationalState(grid, base.t_end, base.delay, chi)


def forward_integral_epsilon(phi: np.ndarray, path: BrownianPath, epsilon: float,
                             t_end: float | None = None):
    """Riemann-sum forward integral: sum of phi(t_k) (B(t_k+eps)-B(t_k))/eps * dt.

    `phi` holds integrand values at grid left endpoints.  This epsilon-shifted
    form is the validation oracle for the left-endpoint scheme (epsilon = dt
    reproduces the plain left-endpoint stochastic sum).
    """
    grid = path.grid
    if t_end is None:
        t_end = grid.t_end
    n_end = grid.index_of(t_end)
    m = grid.steps_in(epsilon)
    if m < 1:
        raise ValueError("epsilon must be a positive multiple of dt")
    if n_end - 1 + m > grid.n_steps:
        raise ValueError("path too short: needs values up to t_end + epsilon")
    phi = np.asarray(phi, dtype=float)
    vals = path.values
    shifted = (vals[..., m:m + n_end] - vals[..., :n_end]) / epsilon
    out = np.sum(phi[..., :n_end] * shifted, axis=-1) * grid.dt
    return out if vals.ndim > 1 else float(out)
