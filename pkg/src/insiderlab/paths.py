"""Uniform time grids, seeded driving-noise sampling and Monte Carlo aggregation.

Everything downstream (state simulation, kernel evaluation, verification
runs) consumes the types defined here.  Paths are immutable after
construction; sampling is a pure function of (grid, substream), so any
batch partitioning reproduces the same per-index paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "SeedPolicy",
    "BrownianPath",
    "MarkLaw",
    "JumpPath",
    "MCEstimate",
    "sample_brownian",
    "sample_brownian_paths",
    "sample_jumps",
    "compensated_integral",
    "mc_aggregate",
    "chunked",
]

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_start + k*dt for k = 0..n_steps."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("grid needs at least one step")
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ValueError("grid endpoints must be finite")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of t; raises if t is not a grid point."""
        k = round((t - self.t_start) / self.dt)
        if k < 0 or k > self.n_steps or abs(self.t_start + k * self.dt - t) > _GRID_TOL * max(1.0, abs(t)):
            raise ValueError(f"time {t!r} is not on the grid (dt={self.dt!r})")
        return k

    def steps_in(self, span: float) -> int:
        """Number of steps covering `span`; raises if span is not a multiple of dt."""
        m = round(span / self.dt)
        if m < 0 or abs(m * self.dt - span) > _GRID_TOL * max(1.0, abs(span)):
            raise ValueError(f"span {span!r} is not a whole number of steps (dt={self.dt!r})")
        return m


@dataclass(frozen=True)
class SeedPolicy:
    """Derives independent substreams by hashing (master_seed, path index).

    The derivation is stateless, so path `i` gets the same stream no matter
    how a batch is partitioned across workers.
    """

    master_seed: int

    def substream(self, path_index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(path_index,))
        return np.random.default_rng(ss)

    def stage(self, tag: int) -> "SeedPolicy":
        """Independent policy for a named sub-experiment (tag is an integer label)."""
        child = np.random.SeedSequence(entropy=(self.master_seed, tag)).generate_state(1, np.uint64)[0]
        return SeedPolicy(int(child))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Discretized Brownian motion, B(t_start) = 0.

    `values` has shape (n_steps+1,) for a single path or (n_paths, n_steps+1)
    for a batch; the last axis is time.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[-1] != self.grid.n_steps + 1:
            raise ValueError("values do not match the grid")

    @property
    def increments(self) -> np.ndarray:
        cached = getattr(self, "_incr", None)
        if cached is None:
            cached = np.diff(self.values, axis=-1)
            object.__setattr__(self, "_incr", cached)
        return cached

    @property
    def n_paths(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[0]

    def path(self, i: int) -> "BrownianPath":
        if self.values.ndim == 1:
            if i != 0:
                raise IndexError("single path")
            return self
        return BrownianPath(self.grid, self.values[i])

    def value_at(self, t: float) -> np.ndarray:
        return self.values[..., self.grid.index_of(t)]


def sample_brownian(grid: TimeGrid, seed) -> BrownianPath:
    """Sample one Brownian path on `grid`; `seed` is an int or a Generator."""
    rng = _as_rng(seed)
    incr = rng.standard_normal(grid.n_steps) * math.sqrt(grid.dt)
    values = np.empty(grid.n_steps + 1)
    values[0] = 0.0
    np.cumsum(incr, out=values[1:])
    return BrownianPath(grid, values)


def sample_brownian_paths(grid: TimeGrid, policy: SeedPolicy, n_paths: int,
                          first_index: int = 0) -> BrownianPath:
    """Batch of paths; row i reproduces sample_brownian(grid, policy.substream(first_index+i))."""
    sqdt = math.sqrt(grid.dt)
    values = np.empty((n_paths, grid.n_steps + 1))
    values[:, 0] = 0.0
    for i in range(n_paths):
        rng = policy.substream(first_index + i)
        np.cumsum(rng.standard_normal(grid.n_steps) * sqdt, out=values[i, 1:])
    return BrownianPath(grid, values)


@dataclass(frozen=True, eq=False)
class MarkLaw:
    """Jump-mark distribution together with a quadrature of its density.

    `nodes`/`weights` approximate integrals against the normalized mark law,
    sum(weights) == 1; the jump measure puts total mass `intensity` on them.
    """

    sample: Callable[[np.random.Generator, int], np.ndarray]
    nodes: np.ndarray
    weights: np.ndarray

    @staticmethod
    def discrete(values: Sequence[float], probs: Sequence[float]) -> "MarkLaw":
        v = np.asarray(values, dtype=float)
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        return MarkLaw(lambda rng, n: rng.choice(v, size=n, p=p), v, p)

    @staticmethod
    def normal(mu: float, sd: float, n_nodes: int = 21) -> "MarkLaw":
        x, w = np.polynomial.hermite.hermgauss(n_nodes)
        return MarkLaw(
            lambda rng, n: mu + sd * rng.standard_normal(n),
            mu + sd * math.sqrt(2.0) * x,
            w / math.sqrt(math.pi),
        )


@dataclass(frozen=True, eq=False)
class JumpPath:
    """Finite-activity compound Poisson realization plus its compensator quadrature.

    `nu_nodes`/`nu_weights` discretize the jump measure; sum(nu_weights)
    equals the intensity, so compensating a step costs dt * sum(h(nodes)*w).
    """

    grid: TimeGrid
    times: np.ndarray
    marks: np.ndarray
    intensity: float
    nu_nodes: np.ndarray
    nu_weights: np.ndarray

    def __post_init__(self):
        if self.times.size and np.any(np.diff(self.times) < 0):
            raise ValueError("jump times must be nondecreasing")
        if self.times.shape != self.marks.shape:
            raise ValueError("times and marks must align")

    @property
    def n_jumps(self) -> int:
        return int(self.times.size)

    def step_indices(self) -> np.ndarray:
        """Step k owning each jump time (jump in [t_k, t_{k+1}))."""
        k = np.floor((self.times - self.grid.t_start) / self.grid.dt).astype(int)
        return np.clip(k, 0, self.grid.n_steps - 1)


def sample_jumps(grid: TimeGrid, intensity: float, mark_law: MarkLaw, seed) -> JumpPath:
    """Sample a compound Poisson jump path with the given intensity and mark law."""
    if intensity < 0:
        raise ValueError("intensity must be nonnegative")
    rng = _as_rng(seed)
    span = grid.t_end - grid.t_start
    count = int(rng.poisson(intensity * span)) if intensity > 0 else 0
    times = np.sort(grid.t_start + span * rng.random(count))
    marks = np.asarray(mark_law.sample(rng, count), dtype=float)
    return JumpPath(grid, times, marks, float(intensity),
                    np.asarray(mark_law.nodes, dtype=float),
                    float(intensity) * np.asarray(mark_law.weights, dtype=float))


def compensated_integral(jump: JumpPath, h: Callable[[float, np.ndarray], np.ndarray],
                         t_end: float | None = None) -> float:
    """Discrete compensated integral of a deterministic integrand h(t, mark).

    Jump sum minus the left-endpoint quadrature of the compensator.
    """
    grid = jump.grid
    n_end = grid.index_of(t_end) if t_end is not None else grid.n_steps
    tt = grid.times
    keep = jump.times < tt[n_end]
    jump_sum = float(np.sum(h(jump.times[keep], jump.marks[keep]))) if np.any(keep) else 0.0
    comp = 0.0
    for k in range(n_end):
        comp += float(np.sum(h(tt[k], jump.nu_nodes) * jump.nu_weights)) * grid.dt
    return jump_sum - comp


@dataclass(frozen=True)
class MCEstimate:
    """Monte Carlo figure with its statistical error and provenance."""

    mean: float
    stderr: float
    n: int
    master_seed: int

    def gap_sigmas(self, reference: float) -> float:
        """|mean - reference| in units of stderr (inf for stderr == 0 and a gap)."""
        gap = abs(self.mean - reference)
        if self.stderr == 0.0:
            return 0.0 if gap == 0.0 else math.inf
        return gap / self.stderr

    def consistent_with(self, reference: float, n_sigmas: float = 4.0) -> bool:
        return self.gap_sigmas(reference) <= n_sigmas


def mc_aggregate(values, master_seed: int = 0) -> MCEstimate:
    """Aggregate per-path scalars into mean and standard error.

    Order-independent up to floating-point reassociation; needs n >= 2.
    """
    x = np.asarray(list(values) if isinstance(values, Iterator) else values, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    mean = float(np.mean(x))
    stderr = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return MCEstimate(mean, stderr, int(x.size), master_seed)


def chunked(n_total: int, block: int) -> Iterator[tuple[int, int]]:
    """Yield (start, stop) index ranges covering range(n_total)."""
    start = 0
    while start < n_total:
        stop = min(start + block, n_total)
        yield start, stop
        start = stop
