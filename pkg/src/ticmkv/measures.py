"""Empirical measures, Wasserstein-2 distances, and distribution curves.

The fixed-point iteration lives on time-gridded curves of equal-weight,
equal-count particle clouds, so all transport here is between clouds of the
same size: exact sorting in one dimension, exact assignment in higher
dimensions up to a size cutoff, sliced Monte-Carlo beyond it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import rng

#: clouds larger than this fall back to sliced distances in dimension >= 2
ASSIGNMENT_CUTOFF = 512
DEFAULT_N_PROJECTIONS = 64

GRID_RTOL = 1e-12
COUPLING_SLACK = 1e-9


class MeasureError(ValueError):
    """Raised for malformed measures or incompatible measure pairs."""


def _as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise MeasureError(f"points must be a nonempty (count, dim) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise MeasureError("points contain non-finite coordinates")
    return pts


@dataclass(frozen=True)
class EmpiricalMeasure:
    """An equal-weight cloud of ``count`` points in ``dim`` dimensions."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_cloud(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class MomentVector:
    """Moments through which coefficients may depend on a measure.

    ``mean`` is a ``(dim,)`` vector (or ``(n, dim)`` for a batch of
    leave-one-out views), ``second_moment`` the scalar mean of ``|x|^2``, and
    ``generalized`` holds one entry per model-declared pointwise functional.
    """

    mean: np.ndarray
    second_moment: np.ndarray | float
    generalized: tuple = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        object.__setattr__(self, "mean", mean)
        if mean.ndim == 1:  # Jensen bound only checked for unbatched moments
            sq = float(mean @ mean)
            if float(self.second_moment) < sq - 1e-12 * max(1.0, sq):
                raise MeasureError(
                    f"second moment {self.second_moment} below |mean|^2 {sq}"
                )


def moments(mu: EmpiricalMeasure, functionals: Sequence[tuple[str, Callable]] = ()) -> MomentVector:
    """Sample mean, mean squared norm, and declared functional averages."""
    pts = mu.points
    mean = pts.mean(axis=0)
    second = float(np.mean(np.einsum("nd,nd->n", pts, pts)))
    extra = tuple(float(np.mean(fn(pts))) for _, fn in functionals)
    return MomentVector(mean=mean, second_moment=second, generalized=extra)


def time_grid(t0: float, horizon: float, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not horizon > t0:
        raise ValueError(f"need horizon > t0, got [{t0}, {horizon}]")
    return np.linspace(t0, horizon, n_steps + 1)


def _check_uniform(grid: np.ndarray) -> None:
    steps = np.diff(grid)
    if steps.size == 0 or np.any(steps <= 0):
        raise MeasureError("grid must be strictly increasing with at least two nodes")
    h = (grid[-1] - grid[0]) / steps.size
    if np.max(np.abs(steps - h)) > GRID_RTOL * max(abs(grid[-1]), 1.0):
        raise MeasureError("grid must be uniform")


@dataclass(frozen=True)
class DistributionCurve:
    """A uniform time grid together with one cloud per node."""

    grid: np.ndarray
    measures: tuple[EmpiricalMeasure, ...]

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "measures", tuple(self.measures))
        _check_uniform(grid)
        if len(self.measures) != grid.size:
            raise MeasureError(
                f"{len(self.measures)} measures for {grid.size} grid nodes"
            )
        dims = {m.dim for m in self.measures}
        counts = {m.count for m in self.measures}
        if len(dims) != 1 or len(counts) != 1:
            raise MeasureError("all nodes must share dim and count")

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    @property
    def count(self) -> int:
        return self.measures[0].count

    @property
    def n_nodes(self) -> int:
        return self.grid.size

    @property
    def step(self) -> float:
        return float((self.grid[-1] - self.grid[0]) / (self.grid.size - 1))

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def node(self, k: int) -> EmpiricalMeasure:
        return self.measures[k]

    def stacked(self) -> np.ndarray:
        """All clouds as one ``(n_nodes, count, dim)`` array."""
        return np.stack([m.points for m in self.measures])

    def moment_vectors(self, functionals: Sequence[tuple[str, Callable]] = ()) -> tuple[MomentVector, ...]:
        return tuple(moments(m, functionals) for m in self.measures)


@dataclass(frozen=True)
class MomentCurve:
    """Moments-only stand-in for a frozen curve (e.g. reloaded from CSV)."""

    grid: np.ndarray
    moments: tuple[MomentVector, ...]

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "moments", tuple(self.moments))
        _check_uniform(grid)
        if len(self.moments) != grid.size:
            raise MeasureError("one moment vector per grid node required")

    @property
    def n_nodes(self) -> int:
        return self.grid.size


def as_moment_curve(curve, functionals: Sequence[tuple[str, Callable]] = ()) -> MomentCurve:
    if isinstance(curve, MomentCurve):
        return curve
    return MomentCurve(grid=curve.grid, moments=curve.moment_vectors(functionals))


def constant_curve(grid: np.ndarray, cloud: EmpiricalMeasure) -> DistributionCurve:
    grid = np.asarray(grid, dtype=float)
    return DistributionCurve(grid=grid, measures=(cloud,) * grid.size)


# ---------------------------------------------------------------------------
# Wasserstein-2 distances
# ---------------------------------------------------------------------------

def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure, equal_counts: bool) -> None:
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if equal_counts and mu.count != nu.count:
        raise MeasureError(
            f"exact methods need equal counts, got {mu.count} vs {nu.count}"
        )


def _w2_sorted_1d(x: np.ndarray, y: np.ndarray) -> float:
    # optimal coupling in 1-D matches sorted samples
    diff = np.sort(x) - np.sort(y)
    return float(np.sqrt(np.mean(diff * diff)))


def _w2_assignment(x: np.ndarray, y: np.ndarray) -> float:
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def _w2_sliced(x: np.ndarray, y: np.ndarray, n_proj: int, seed: int) -> float:
    gen = rng.generator(seed, rng.PROJECTIONS)
    dirs = gen.standard_normal((n_proj, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xs = np.sort(x @ dirs.T, axis=0)
    ys = np.sort(y @ dirs.T, axis=0)
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


def wasserstein2(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    method: str = "auto",
    n_proj: int = DEFAULT_N_PROJECTIONS,
    seed: int = 0,
) -> float:
    """Wasserstein-2 distance between two equal-weight clouds.

    ``exact1d`` sorts (optimal coupling in one dimension), ``assignment``
    solves the exact matching problem, ``sliced`` averages squared 1-D
    distances over ``n_proj`` random directions and is a documented
    approximation.  ``auto`` picks exact1d for dim 1, assignment up to
    ``ASSIGNMENT_CUTOFF`` points, sliced beyond.
    """
    if method == "auto":
        if mu.dim == 1:
            method = "exact1d"
        elif mu.count <= ASSIGNMENT_CUTOFF and nu.count <= ASSIGNMENT_CUTOFF:
            method = "assignment"
        else:
            method = "sliced"
    if method == "exact1d":
        if mu.dim != 1:
            raise MeasureError("exact1d requires dim = 1")
        _check_pair(mu, nu, equal_counts=True)
        return _w2_sorted_1d(mu.points[:, 0], nu.points[:, 0])
    if method == "assignment":
        _check_pair(mu, nu, equal_counts=True)
        return _w2_assignment(mu.points, nu.points)
    if method == "sliced":
        _check_pair(mu, nu, equal_counts=False)
        if mu.count != nu.count:
            raise MeasureError("sliced implementation pairs sorted projections, needs equal counts")
        return _w2_sliced(mu.points, nu.points, n_proj, seed)
    raise ValueError(f"unknown method {method!r}")


def curve_distance(c1: DistributionCurve, c2: DistributionCurve, method: str = "auto") -> float:
    """Sup over grid nodes of the nodewise Wasserstein-2 distance."""
    if c1.grid.shape != c2.grid.shape or np.max(np.abs(c1.grid - c2.grid)) > GRID_RTOL * max(
        abs(float(c1.grid[-1])), 1.0
    ):
        raise MeasureError("curves live on different grids")
    if c1.dim != c2.dim or c1.count != c2.count:
        raise MeasureError("curves must share dim and count")
    if c1.dim == 1 and method in ("auto", "exact1d"):
        a = np.sort(c1.stacked()[:, :, 0], axis=1)
        b = np.sort(c2.stacked()[:, :, 0], axis=1)
        return float(np.sqrt(np.max(np.mean((a - b) ** 2, axis=1))))
    return max(
        wasserstein2(m1, m2, method=method) for m1, m2 in zip(c1.measures, c2.measures)
    )


def quantile_w2_1d(x_samples, y_samples) -> float:
    """Exact 1-D Wasserstein-2 between equal-weight clouds of any two sizes.

    Integrates the squared gap between the two piecewise-constant empirical
    quantile functions over their merged breakpoints.  Diagnostic companion to
    :func:`wasserstein2` for cross-resolution comparisons (e.g. an n-player
    cloud against a finer reference cloud); the exact-method error contract of
    :func:`wasserstein2` is unchanged.
    """
    x = np.sort(np.asarray(x_samples, dtype=float).reshape(-1))
    y = np.sort(np.asarray(y_samples, dtype=float).reshape(-1))
    n, m = x.size, y.size
    if n < 1 or m < 1:
        raise MeasureError("empty sample")
    if n == m:
        return float(np.sqrt(np.mean((x - y) ** 2)))
    cuts = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    xi = x[np.minimum((mids * n).astype(int), n - 1)]
    yi = y[np.minimum((mids * m).astype(int), m - 1)]
    return float(np.sqrt(np.sum(widths * (xi - yi) ** 2)))


def curve_distance_cross_resolution(c1: DistributionCurve, c2: DistributionCurve) -> float:
    """Sup-over-nodes quantile distance for 1-D curves of different counts."""
    if c1.grid.shape != c2.grid.shape or np.max(np.abs(c1.grid - c2.grid)) > GRID_RTOL * max(
        abs(float(c1.grid[-1])), 1.0
    ):
        raise MeasureError("curves live on different grids")
    if c1.dim != 1 or c2.dim != 1:
        raise MeasureError("cross-resolution distance is one-dimensional")
    return max(
        quantile_w2_1d(m1.points[:, 0], m2.points[:, 0])
        for m1, m2 in zip(c1.measures, c2.measures)
    )


@dataclass(frozen=True)
class CouplingBoundReport:
    w2: float
    l2: float
    ok: bool


def coupling_bound_check(paired_x, paired_y) -> CouplingBoundReport:
    """Check w2(law x, law y)^2 <= mean |x_i - y_i|^2 for index-paired samples."""
    x = _as_cloud(paired_x)
    y = _as_cloud(paired_y)
    if x.shape != y.shape:
        raise MeasureError(f"paired samples must match in shape, got {x.shape} vs {y.shape}")
    w2 = wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y))
    l2 = float(np.mean(np.sum((x - y) ** 2, axis=1)))
    return CouplingBoundReport(w2=w2, l2=l2, ok=w2 * w2 <= l2 + COUPLING_SLACK)


def holder_profile(curve: DistributionCurve) -> float:
    """Max over node pairs of squared distance per unit time separation."""
    grid = curve.grid
    if grid.size < 2:
        raise MeasureError("profile needs at least two nodes")
    if curve.dim == 1:
        sorted_nodes = np.sort(curve.stacked()[:, :, 0], axis=1)
        best = 0.0
        for i in range(grid.size - 1):
            w2sq = np.mean((sorted_nodes[i + 1 :] - sorted_nodes[i]) ** 2, axis=1)
            ratios = w2sq / (grid[i + 1 :] - grid[i])
            best = max(best, float(np.max(ratios)))
        return best
    best = 0.0
    for i in range(grid.size - 1):
        for j in range(i + 1, grid.size):
            w = wasserstein2(curve.node(i), curve.node(j))
            best = max(best, w * w / float(grid[j] - grid[i]))
    return best


# ---------------------------------------------------------------------------
# CSV export / import
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def curve_to_csv(curve, path, functionals: Sequence[tuple[str, Callable]] = ()) -> None:
    """One row per node: t, mean, second moment, deciles (dim 1), functionals."""
    mom = as_moment_curve(curve, functionals)
    dim = np.atleast_1d(mom.moments[0].mean).size
    is_cloud = isinstance(curve, DistributionCurve)
    header = ["t"] + [f"mean_{i + 1}" for i in range(dim)] + ["second_moment"]
    phi_names = [name for name, _ in functionals]
    if not phi_names and mom.moments[0].generalized:
        phi_names = [f"phi_{i + 1}" for i in range(len(mom.moments[0].generalized))]
    decile_qs = np.arange(1, 10) / 10.0
    with_deciles = is_cloud and curve.dim == 1
    if with_deciles:
        header += [f"decile_{int(q * 100)}" for q in decile_qs]
    header += [f"phi_{name}" if not name.startswith("phi_") else name for name in phi_names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, t in enumerate(mom.grid):
            m = mom.moments[k]
            row = [_fmt(t)] + [_fmt(v) for v in np.atleast_1d(m.mean)] + [_fmt(m.second_moment)]
            if with_deciles:
                row += [_fmt(v) for v in np.quantile(curve.node(k).points[:, 0], decile_qs)]
            row += [_fmt(v) for v in m.generalized]
            writer.writerow(row)


def moment_curve_from_csv(path) -> MomentCurve:
    """Rebuild the moments-only view written by :func:`curve_to_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [list(map(float, row)) for row in reader]
    mean_cols = [i for i, name in enumerate(header) if name.startswith("mean_")]
    second_col = header.index("second_moment")
    phi_cols = [i for i, name in enumerate(header) if name.startswith("phi_")]
    grid = np.array([row[0] for row in rows])
    moms = tuple(
        MomentVector(
            mean=np.array([row[i] for i in mean_cols]),
            second_moment=row[second_col],
            generalized=tuple(row[i] for i in phi_cols),
        )
        for row in rows
    )
    return MomentCurve(grid=grid, moments=moms)
