"""Particle simulation: the forward law map and its cross-checks.

Euler-Maruyama with the empirical cloud substituted for the law at every
step realizes the strategy-to-distribution-curve map; a frozen-curve variant
evaluates costs for a fixed a-priori curve; a Picard mode and an n-player
simulator cross-validate the self-interacting approximation.

Noise is drawn per absolute step index from counter-based streams, so a rerun
with the same (seed, N, grid) is bit-identical regardless of the worker-count
hint, and fixed-point iterations share increments (common random numbers).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from .measures import (
    DistributionCurve,
    EmpiricalMeasure,
    MomentVector,
    as_moment_curve,
    constant_curve,
    curve_distance,
    holder_profile,
    time_grid,
)
from .strategies import FeedbackStrategy


class SimulationBlowUp(RuntimeError):
    """State escaped the guard radius: the dynamics are not dissipative enough."""


class PicardError(RuntimeError):
    """Picard cross-check failed to meet tolerance within max_iter sweeps."""

    def __init__(self, message: str, distances: list[float]):
        super().__init__(message)
        self.distances = distances


@dataclass(frozen=True)
class SimOptions:
    """Particle count, grid, and master seed for one simulation."""

    n_particles: int
    n_steps: int
    horizon: float
    seed: int
    t0: float = 0.0
    worker_count: int = 1  # scheduling hint only; output never depends on it
    blowup_threshold: float = 1e8

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        rng.check_seed(self.seed)

    @property
    def grid(self) -> np.ndarray:
        return time_grid(self.t0, self.horizon, self.n_steps)

    @property
    def step(self) -> float:
        return (self.horizon - self.t0) / self.n_steps


@dataclass(frozen=True)
class ParticlePaths:
    """All particle positions on the grid, plus the seed that produced them."""

    values: np.ndarray  # (n_nodes, n_particles, dim)
    grid: np.ndarray
    seed: int
    strategy_label: str = ""

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_particles(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def curve(self) -> DistributionCurve:
        nodes = []
        for k in range(self.n_nodes):
            pts = self.values[k]
            pts.setflags(write=False)
            nodes.append(EmpiricalMeasure(pts))
        return DistributionCurve(grid=self.grid, measures=tuple(nodes))


# ---------------------------------------------------------------------------
# initial-law samplers
# ---------------------------------------------------------------------------

def gaussian_sampler(mean, sd) -> Callable:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)

    def sample(gen: np.random.Generator, n: int) -> np.ndarray:
        return mean + sd * gen.standard_normal((n, mean.size))

    return sample


def point_sampler(x0) -> Callable:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def sample(gen: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(x0, (n, 1))

    return sample


def uniform_sampler(lo, hi) -> Callable:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), lo.shape)

    def sample(gen: np.random.Generator, n: int) -> np.ndarray:
        return lo + (hi - lo) * gen.random((n, lo.size))

    return sample


def _draw_initial(model, init_sampler, opts: SimOptions, n: int | None = None) -> np.ndarray:
    n = opts.n_particles if n is None else n
    x0 = np.asarray(init_sampler(rng.generator(opts.seed, rng.INIT), n), dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if x0.shape != (n, model.dim):
        raise ValueError(f"initial sampler returned shape {x0.shape}, expected {(n, model.dim)}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial sample contains non-finite values")
    return x0


def _block_moments(x_block: np.ndarray, functionals) -> MomentVector:
    mean = x_block.mean(axis=0)
    second = float(np.mean(np.einsum("nd,nd->n", x_block, x_block)))
    extra = tuple(float(np.mean(fn(x_block))) for _, fn in functionals)
    return MomentVector(mean=mean, second_moment=second, generalized=extra)


def _guard(x_block: np.ndarray, threshold: float, t: float) -> None:
    peak = float(np.max(np.abs(x_block)))
    if not np.isfinite(peak) or peak > threshold:
        raise SimulationBlowUp(
            f"max |X| = {peak:.3g} exceeded {threshold:.3g} at t = {t:.6g}; "
            "the closed-loop dynamics appear unstable on this horizon"
        )


# ---------------------------------------------------------------------------
# forward law map
# ---------------------------------------------------------------------------

def simulate_mckean_vlasov(
    model,
    strategy: FeedbackStrategy,
    init_sampler: Callable,
    opts: SimOptions,
) -> tuple[DistributionCurve, ParticlePaths]:
    """Strategy -> distribution curve, via the interacting particle system.

    At each step the cloud's own moment vector stands in for the law, so one
    forward sweep produces the curve; see :func:`picard_iterate_law` for the
    frozen-law cross-check.
    """
    grid = opts.grid
    h = opts.step
    n = opts.n_particles
    x = _draw_initial(model, init_sampler, opts)
    values = np.empty((opts.n_steps + 1, n, model.dim))
    values[0] = x
    for k in range(opts.n_steps):
        t = float(grid[k])
        m = _block_moments(x, model.functionals)
        u = strategy(t, x)
        drift = model.drift(t, x, m, u)
        load = model.noise_loading(t, x, m)
        z = rng.normal_block(opts.seed, rng.DRIVE, k, (n, 1))
        x = x + drift * h + load * (np.sqrt(h) * z)
        _guard(x, opts.blowup_threshold, float(grid[k + 1]))
        values[k + 1] = x
    paths = ParticlePaths(values=values, grid=grid, seed=opts.seed, strategy_label=strategy.label)
    return paths.curve(), paths


# ---------------------------------------------------------------------------
# frozen-curve simulation and cost sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenCostSamples:
    """Per-path running and terminal cost samples, one row per requested tau."""

    taus: tuple[float, ...]
    running: np.ndarray   # (n_tau, n_paths)
    terminal: np.ndarray  # (n_tau, n_paths)
    terminal_states: np.ndarray  # (n_paths, dim)

    def total(self, i: int = 0) -> np.ndarray:
        return self.running[i] + self.terminal[i]


def _node_index(grid: np.ndarray, t: float) -> int:
    h = float(grid[1] - grid[0])
    k = int(round((t - float(grid[0])) / h))
    if k < 0 or k >= grid.size or abs(float(grid[k]) - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not a node of the curve grid")
    return k


def simulate_frozen(
    model,
    control: FeedbackStrategy,
    frozen_curve,
    t0: float,
    x0,
    opts: SimOptions,
    taus: Sequence[float] = (),
) -> FrozenCostSamples:
    """Cost samples under a fixed a-priori curve, started from (t0, x0).

    ``x0`` may be a single state (every path starts there) or an ``(n, dim)``
    block of starts, one path each.  Running costs use left-endpoint
    quadrature; terminal costs are evaluated for every requested tau.
    Noise is keyed by absolute step index, so two controls compared under the
    same seed share increments even after their paths separate.
    """
    mom = as_moment_curve(frozen_curve, model.functionals)
    grid = mom.grid
    if float(grid[-1]) < model.horizon - 1e-9 * max(1.0, model.horizon):
        raise ValueError(
            f"frozen curve ends at {grid[-1]}, short of the horizon {model.horizon}"
        )
    k0 = _node_index(grid, t0)
    n_last = grid.size - 1
    taus = tuple(float(tau) for tau in (taus if len(taus) else (t0,)))

    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full((opts.n_particles, model.dim), float(x0))
    elif x0.ndim == 1 and x0.size == model.dim:
        x0 = np.tile(x0, (opts.n_particles, 1))
    elif x0.ndim == 1:
        x0 = x0[:, None]
    n = x0.shape[0]
    if x0.shape != (n, model.dim):
        raise ValueError(f"bad start shape {x0.shape}")

    h = float(grid[1] - grid[0])
    y = x0.copy()
    running = np.zeros((len(taus), n))
    for k in range(k0, n_last):
        t = float(grid[k])
        m = mom.moments[k]
        u = control(t, y)
        for i, tau in enumerate(taus):
            running[i] += model.running_cost(tau, t, y, u, m) * h
        drift = model.drift(t, y, m, u)
        load = model.noise_loading(t, y, m)
        z = rng.normal_block(opts.seed, rng.DRIVE, k, (n, 1))
        y = y + drift * h + load * (np.sqrt(h) * z)
        _guard(y, opts.blowup_threshold, float(grid[k + 1]))
    m_end = mom.moments[n_last]
    terminal = np.stack([model.terminal_cost_values(tau, y, m_end) for tau in taus])
    return FrozenCostSamples(taus=taus, running=running, terminal=terminal, terminal_states=y)


# ---------------------------------------------------------------------------
# Picard cross-check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PicardResult:
    curve: DistributionCurve
    distances: tuple[float, ...]


def picard_iterate_law(
    model,
    strategy: FeedbackStrategy,
    init_sampler: Callable,
    opts: SimOptions,
    tol: float = 1e-3,
    max_iter: int = 50,
) -> PicardResult:
    """Iterate frozen-law simulation until the curve stops moving.

    Common noise across sweeps (the same per-step blocks every iteration)
    makes the iteration a deterministic map; with law-independent coefficients
    the second sweep reproduces the first bit for bit and the recorded
    distance is exactly zero.
    """
    grid = opts.grid
    x0 = _draw_initial(model, init_sampler, opts)
    x0.setflags(write=False)
    current = constant_curve(grid, EmpiricalMeasure(x0))
    distances: list[float] = []
    for _ in range(max_iter):
        mom = as_moment_curve(current, model.functionals)
        n = opts.n_particles
        y = np.asarray(x0, dtype=float).copy()
        values = np.empty((opts.n_steps + 1, n, model.dim))
        values[0] = y
        h = opts.step
        for k in range(opts.n_steps):
            t = float(grid[k])
            m = mom.moments[k]
            u = strategy(t, y)
            y = y + model.drift(t, y, m, u) * h + model.noise_loading(t, y, m) * (
                np.sqrt(h) * rng.normal_block(opts.seed, rng.DRIVE, k, (n, 1))
            )
            _guard(y, opts.blowup_threshold, float(grid[k + 1]))
            values[k + 1] = y
        nxt = ParticlePaths(values=values, grid=grid, seed=opts.seed, strategy_label=strategy.label).curve()
        distances.append(curve_distance(nxt, current))
        current = nxt
        if distances[-1] < tol:
            return PicardResult(curve=current, distances=tuple(distances))
    raise PicardError(
        f"no fixed point within {max_iter} sweeps (last distance {distances[-1]:.3g})", distances
    )


# ---------------------------------------------------------------------------
# n-player game
# ---------------------------------------------------------------------------

def _leave_one_out_moments(x_block: np.ndarray, functionals) -> MomentVector:
    n = x_block.shape[0]
    total = x_block.sum(axis=0)
    mean_loo = (total - x_block) / (n - 1)
    sq = np.einsum("nd,nd->n", x_block, x_block)
    second_loo = (sq.sum() - sq) / (n - 1)
    extra = []
    for _, fn in functionals:
        vals = np.asarray(fn(x_block), dtype=float)
        extra.append((vals.sum() - vals) / (n - 1))
    return MomentVector(mean=mean_loo, second_moment=second_loo, generalized=tuple(extra))


def simulate_n_player(
    model,
    strategy: FeedbackStrategy,
    n_players: int,
    init_sampler: Callable,
    opts: SimOptions,
) -> DistributionCurve:
    """Finite-game consistency check: each player sees the leave-one-out cloud.

    Every player owns an independent Brownian stream.  The initial-draw and
    driving-noise streams are the ones :func:`simulate_mckean_vlasov` uses, so
    with measure-independent coefficients and equal seeds the two simulations
    are bit-identical.
    """
    if n_players < 2:
        raise ValueError("need at least two players")
    grid = opts.grid
    h = opts.step
    x = _draw_initial(model, init_sampler, opts, n_players)
    values = np.empty((opts.n_steps + 1, n_players, model.dim))
    values[0] = x
    for k in range(opts.n_steps):
        t = float(grid[k])
        m = _leave_one_out_moments(x, model.functionals)
        u = strategy(t, x)
        drift = model.drift(t, x, m, u)
        load = model.noise_loading(t, x, m)
        z = rng.normal_block(opts.seed, rng.DRIVE, k, (n_players, 1))
        x = x + drift * h + load * (np.sqrt(h) * z)
        _guard(x, opts.blowup_threshold, float(grid[k + 1]))
        values[k + 1] = x
    return ParticlePaths(
        values=values, grid=grid, seed=opts.seed, strategy_label=strategy.label
    ).curve()


# ---------------------------------------------------------------------------
# path diagnostics and dumps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentReport:
    """Empirical path-space moment bounds: mean over paths of sup-over-time."""

    sup_second: float
    sup_2plus: float
    holder: float


def moment_report(paths: ParticlePaths, delta: float = 1.0) -> MomentReport:
    sq = np.einsum("knd,knd->kn", paths.values, paths.values)
    per_path_sup = sq.max(axis=0)
    sup_second = float(per_path_sup.mean())
    sup_2plus = float((per_path_sup ** (1.0 + delta / 2.0)).mean())
    return MomentReport(
        sup_second=sup_second, sup_2plus=sup_2plus, holder=holder_profile(paths.curve())
    )


_HEADER = struct.Struct("<4q")


def write_paths(paths: ParticlePaths, path) -> None:
    """Binary dump: little-endian int64 header (nodes, particles, dim, seed),
    then the values as little-endian float64 in C order."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(paths.n_nodes, paths.n_particles, paths.dim, paths.seed))
        fh.write(np.ascontiguousarray(paths.values, dtype="<f8").tobytes())


def read_paths(path, grid: np.ndarray | None = None) -> ParticlePaths:
    with open(path, "rb") as fh:
        n_nodes, n_particles, dim, seed = _HEADER.unpack(fh.read(_HEADER.size))
        raw = np.frombuffer(fh.read(), dtype="<f8")
    values = raw.reshape(n_nodes, n_particles, dim).astype(float)
    if grid is None:
        grid = np.arange(n_nodes, dtype=float)
    return ParticlePaths(values=values, grid=np.asarray(grid, dtype=float), seed=int(seed))
