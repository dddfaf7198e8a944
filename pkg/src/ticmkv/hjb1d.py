"""Finite-difference solver for the backward value family on a 1-D domain.

Given a frozen distribution curve, every evaluation-time row of the value
family satisfies the same linear backward PDE once the drift and running cost
are evaluated at the best response to the diagonal value gradient.  All rows
are marched together from the terminal time with an IMEX scheme:

* diffusion is implicit (one shared tridiagonal factor per step, so nothing
  restricts the step size through the diffusion strength);
* the drift is explicit with upwinding by its sign, which keeps each stage a
  monotone map provided dt * max|drift| <= dx (checked every step, violations
  raise with the required dt);
* each step is the two-stage convex predictor-corrector
      theta* = solve(M, theta + dt E(t_hi, lagged diagonal gradient)),
      theta  = (theta + solve(M, theta* + dt E(t_lo, predicted gradient))) / 2,
  so monotonicity survives the second stage and the diagonal gradient enters
  through a one-step-lagged predictor exactly as in the Riccati marching.

The domain is truncated; ghost nodes extrapolate linearly (zero second
derivative), and the drift keeps only its inward component at the two
boundary nodes.  Accuracy claims are therefore restricted to the inner half
of the domain.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .measures import as_moment_curve
from .model import ModelSpec, best_response
from .strategies import FeedbackStrategy


class MonotonicityError(RuntimeError):
    """Explicit drift stage would lose monotonicity at the current step size."""

    def __init__(self, message: str, required_dt: float):
        super().__init__(message)
        self.required_dt = required_dt


class DegenerateDiffusionError(RuntimeError):
    """The diffusion vanishes on the grid; route degenerate problems through the LQ path."""


@dataclass(frozen=True)
class ValueSurface:
    """Backward value family on the time x space grid.

    ``diag[k]`` is the row evaluated at its own time (tau = t_k) and
    ``diag_grad`` its centered space gradient; ``full[j, k]`` holds row j at
    node k >= j when the solver was asked to keep everything.
    """

    grid: np.ndarray
    x_grid: np.ndarray
    diag: np.ndarray       # (K+1, n_x)
    diag_grad: np.ndarray  # (K+1, n_x)
    full: np.ndarray | None
    drift_bound: float
    required_dt: float

    @property
    def n_nodes(self) -> int:
        return self.grid.size

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0])

    def theta(self, j: int, k: int) -> np.ndarray:
        if self.full is None:
            if j == k:
                return self.diag[j]
            raise ValueError("solver was run with keep='diagonal'; off-diagonal rows not stored")
        if k < j:
            raise ValueError("rows exist for k >= j only")
        return self.full[j, k]


def _gradient(rows: np.ndarray, dx: float) -> np.ndarray:
    """Centered differences, one-sided at the boundary; works on (..., n_x)."""
    g = np.empty_like(rows)
    g[..., 1:-1] = (rows[..., 2:] - rows[..., :-2]) / (2.0 * dx)
    g[..., 0] = (rows[..., 1] - rows[..., 0]) / dx
    g[..., -1] = (rows[..., -1] - rows[..., -2]) / dx
    return g


def _second_difference(rows: np.ndarray, dx: float) -> np.ndarray:
    s = np.zeros_like(rows)
    s[..., 1:-1] = (rows[..., 2:] - 2.0 * rows[..., 1:-1] + rows[..., :-2]) / (dx * dx)
    return s


def _upwind(drift: np.ndarray, rows: np.ndarray, dx: float) -> np.ndarray:
    """Monotone drift term: forward difference where drift > 0, backward where < 0.

    The missing one-sided difference at each boundary node is dropped (only
    the inward-pointing component acts there), preserving monotonicity.
    """
    fwd = np.zeros_like(rows)
    bwd = np.zeros_like(rows)
    fwd[..., :-1] = (rows[..., 1:] - rows[..., :-1]) / dx
    bwd[..., 1:] = (rows[..., 1:] - rows[..., :-1]) / dx
    pos = np.maximum(drift, 0.0)
    neg = np.minimum(drift, 0.0)
    return pos * fwd + neg * bwd


def _eval_rows(fn, taus: np.ndarray, *args) -> np.ndarray:
    """fn(tau, ...) for every tau as a (n_rows, n_x) array, vectorized if possible."""
    try:
        out = np.asarray(fn(taus[:, None], *args), dtype=float)
        if out.shape == (taus.size, np.shape(args[1])[0]):
            return out
    except Exception:
        pass
    return np.stack([np.broadcast_to(np.asarray(fn(float(tau), *args), dtype=float), np.shape(args[1])) for tau in taus])


def solve_hjb_family(
    model: ModelSpec,
    mu,
    x_domain: tuple[float, float],
    k_x: int = 200,
    keep: str = "full",
    gradient_source=None,
) -> ValueSurface:
    """March all evaluation-time rows backward on a truncated 1-D domain.

    ``gradient_source(t, x_grid)``, when given, replaces the self-consistent
    diagonal gradient in the best-response evaluation; with it the scheme is a
    fixed linear monotone map (used by the comparison property tests).
    ``keep='diagonal'`` stores only the diagonal rows and their gradients,
    which is all the strategy extraction needs.
    """
    if model.dim != 1:
        raise ValueError("the finite-difference solver is one-dimensional")
    if keep not in ("full", "diagonal"):
        raise ValueError("keep must be 'full' or 'diagonal'")
    x_lo, x_hi = float(x_domain[0]), float(x_domain[1])
    if not x_hi > x_lo or k_x < 8:
        raise ValueError("need x_hi > x_lo and at least 8 space intervals")

    mom = as_moment_curve(mu, model.functionals)
    grid = np.asarray(mom.grid, dtype=float)
    if abs(float(grid[-1]) - model.horizon) > 1e-9 * max(1.0, model.horizon):
        raise ValueError(f"curve ends at {grid[-1]}, model horizon is {model.horizon}")
    n = grid.size
    h = float(grid[1] - grid[0])
    x = np.linspace(x_lo, x_hi, k_x + 1)
    n_x = x.size
    dx = float(x[1] - x[0])
    taus = grid

    # terminal slices, exact at the nodes
    m_end = mom.moments[-1]
    rows = _eval_rows(lambda tau, tt, xs, mm: model.terminal_cost(tau, xs, mm), taus, None, x, m_end)

    diag = np.empty((n, n_x))
    diag_grad = np.empty((n, n_x))
    full = np.full((n, n, n_x), np.nan) if keep == "full" else None
    diag[n - 1] = rows[n - 1]
    diag_grad[n - 1] = _gradient(rows[n - 1], dx)
    if full is not None:
        full[:, n - 1] = rows

    drift_bound = 0.0
    required_dt = np.inf

    def diffusion_matrix(t: float, m) -> np.ndarray:
        sigma = np.broadcast_to(np.asarray(model.diffusion(t, x, m), dtype=float), x.shape)
        if np.min(np.abs(sigma)) < 1e-12:
            raise DegenerateDiffusionError(
                f"diffusion vanishes on the grid at t = {t:.6g}; the scheme needs ellipticity"
            )
        half = 0.5 * sigma * sigma * h / (dx * dx)
        ab = np.zeros((3, n_x))
        ab[1, :] = 1.0
        ab[1, 1:-1] += 2.0 * half[1:-1]
        ab[0, 2:] = -half[1:-1]      # super-diagonal entries for rows 1..n-2
        ab[2, :-2] = -half[1:-1]     # sub-diagonal entries
        return ab

    def explicit_part(t: float, m, q_diag: np.ndarray, active_rows: np.ndarray, active_taus: np.ndarray):
        nonlocal drift_bound, required_dt
        u = best_response(model, t, x, q_diag)
        drift = np.asarray(
            model.drift_state(t, x, m) + model.drift_control(t, x, u), dtype=float
        )
        c = float(np.max(np.abs(drift)))
        drift_bound = max(drift_bound, c)
        if c > 0:
            required_dt = min(required_dt, dx / c)
        if h * c > dx * (1.0 + 1e-12):
            raise MonotonicityError(
                f"dt = {h:.3g} violates the drift monotonicity bound at t = {t:.6g}; "
                f"need dt <= {dx / c:.3g}",
                required_dt=dx / c,
            )
        cost = _eval_rows(
            lambda tau, tt, xs, mm: model.running_cost_state(tau, tt, xs, mm), active_taus, t, x, m
        ) + _eval_rows(
            lambda tau, tt, xs, vv: model.running_cost_control(tau, tt, xs, vv), active_taus, t, x, u
        )
        return _upwind(drift, active_rows, dx) + cost

    for k in range(n - 2, -1, -1):
        t_hi, t_lo = float(grid[k + 1]), float(grid[k])
        m_hi, m_lo = mom.moments[k + 1], mom.moments[k]
        active = rows[: k + 1]
        active_taus = taus[: k + 1]
        if gradient_source is None:
            q_lag = diag_grad[k + 1]
        else:
            q_lag = np.asarray(gradient_source(t_hi, x), dtype=float)
        ab = diffusion_matrix(t_lo, m_lo)
        e1 = explicit_part(t_hi, m_hi, q_lag, active, active_taus)
        star = solve_banded((1, 1), ab, (active + h * e1).T).T
        if gradient_source is None:
            q_pred = _gradient(star[k], dx)
        else:
            q_pred = np.asarray(gradient_source(t_lo, x), dtype=float)
        e2 = explicit_part(t_lo, m_lo, q_pred, star, active_taus)
        corrected = solve_banded((1, 1), ab, (star + h * e2).T).T
        new_rows = 0.5 * (active + corrected)
        if not np.all(np.isfinite(new_rows)):
            raise RuntimeError(f"non-finite value at node {k} (t = {t_lo:.6g})")
        rows[: k + 1] = new_rows
        diag[k] = rows[k]
        diag_grad[k] = _gradient(rows[k], dx)
        if full is not None:
            full[: k + 1, k] = new_rows

    return ValueSurface(
        grid=grid,
        x_grid=x,
        diag=diag,
        diag_grad=diag_grad,
        full=full,
        drift_bound=drift_bound,
        required_dt=float(required_dt),
    )


# ---------------------------------------------------------------------------
# gridded strategy extraction
# ---------------------------------------------------------------------------

@dataclass
class GridStrategy(FeedbackStrategy):
    """Bilinear interpolation of per-node controls, clamped outside the domain."""

    grid: np.ndarray
    x_grid: np.ndarray
    controls: np.ndarray  # (K+1, n_x)
    label: str = "grid"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.x_grid = np.asarray(self.x_grid, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        self.control_dim = 1
        dx = float(self.x_grid[1] - self.x_grid[0])
        self.lipschitz_x = float(np.max(np.abs(np.diff(self.controls, axis=1)))) / dx

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        xs = np.clip(np.atleast_2d(x)[:, 0], self.x_grid[0], self.x_grid[-1])
        tg, xg = self.grid, self.x_grid
        k = min(max(int(np.searchsorted(tg, t, side="right")) - 1, 0), tg.size - 2)
        wt = np.clip((t - tg[k]) / (tg[k + 1] - tg[k]), 0.0, 1.0)
        i = np.clip(np.searchsorted(xg, xs, side="right") - 1, 0, xg.size - 2)
        wx = (xs - xg[i]) / (xg[i + 1] - xg[i])
        row0 = (1.0 - wx) * self.controls[k, i] + wx * self.controls[k, i + 1]
        row1 = (1.0 - wx) * self.controls[k + 1, i] + wx * self.controls[k + 1, i + 1]
        return ((1.0 - wt) * row0 + wt * row1)[:, None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "u"])
            for k, t in enumerate(self.grid):
                for i, xi in enumerate(self.x_grid):
                    writer.writerow([repr(float(t)), repr(float(xi)), repr(float(self.controls[k, i]))])

    @classmethod
    def from_csv(cls, path) -> "GridStrategy":
        ts, xs, us = [], [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                ts.append(float(row[0]))
                xs.append(float(row[1]))
                us.append(float(row[2]))
        grid = np.unique(ts)
        x_grid = np.unique(xs)
        controls = np.asarray(us, dtype=float).reshape(grid.size, x_grid.size)
        return cls(grid=grid, x_grid=x_grid, controls=controls)


def extract_strategy_grid(surface: ValueSurface, model: ModelSpec) -> GridStrategy:
    """Per-node best response to the diagonal gradient, bilinearly interpolated."""
    controls = np.empty_like(surface.diag_grad)
    for k, t in enumerate(surface.grid):
        controls[k] = best_response(model, float(t), surface.x_grid, surface.diag_grad[k])
    return GridStrategy(
        grid=surface.grid.copy(),
        x_grid=surface.x_grid.copy(),
        controls=controls,
        label="grid-equilibrium",
    )


# ---------------------------------------------------------------------------
# diagnostics and export
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularityReport:
    """Observed analogues of the classical-solution bounds; diagnostic only."""

    grad_at_center: float
    second_derivative_sup: float
    diag_grad_lipschitz: float


def regularity_report(surface: ValueSurface) -> RegularityReport:
    x = surface.x_grid
    dx = surface.dx
    i0 = int(np.argmin(np.abs(x)))
    grad_at_center = float(np.max(np.abs(surface.diag_grad[:, i0])))
    second = _second_difference(surface.diag, dx)
    second_sup = float(np.max(np.abs(second[:, 1:-1]))) if x.size > 2 else 0.0
    grad_lip = float(np.max(np.abs(np.diff(surface.diag_grad, axis=1)))) / dx
    return RegularityReport(
        grad_at_center=grad_at_center,
        second_derivative_sup=second_sup,
        diag_grad_lipschitz=grad_lip,
    )


def surface_to_csv(surface: ValueSurface, path, stride_t: int = 1, stride_x: int = 1) -> None:
    """Thinned (tau, t, x, value) export; diagonal-only solves export tau = t."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "t", "x", "value"])
        ks = range(0, surface.n_nodes, stride_t)
        xs = range(0, surface.x_grid.size, stride_x)
        for j in ks:
            k_range = ks if surface.full is not None else [j]
            for k in k_range:
                if k < j:
                    continue
                row_vals = surface.theta(j, k)
                for i in xs:
                    writer.writerow(
                        [
                            repr(float(surface.grid[j])),
                            repr(float(surface.grid[k])),
                            repr(float(surface.x_grid[i])),
                            repr(float(row_vals[i])),
                        ]
                    )


def diag_grad_to_csv(surface: ValueSurface, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "diag_grad"])
        for k, t in enumerate(surface.grid):
            for i, xi in enumerate(surface.x_grid):
                writer.writerow([repr(float(t)), repr(float(xi)), repr(float(surface.diag_grad[k, i]))])
