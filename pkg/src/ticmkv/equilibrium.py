"""The fixed-point engine: iterate forward simulation against backward solves.

One iteration maps a distribution curve to the feedback it induces (backward
solve on the frozen curve) and then to the law of the particle system under
that feedback (forward simulation).  A fixed point is an equilibrium: the
curve reproduces itself and the strategy is locally optimal against it.

Common random numbers across iterations (one master seed, step-keyed blocks)
make the finite-N iteration a deterministic map, so convergence of the loop
is separated cleanly from Monte-Carlo noise; the latter is probed afterwards
by :func:`consistency_check` with a fresh seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measures import (
    DistributionCurve,
    EmpiricalMeasure,
    constant_curve,
    curve_distance,
)
from .model import LqModelSpec, ModelSpec
from .riccati import AffineStrategy, RiccatiFamily, extract_strategy_lq, solve_riccati_family
from .hjb1d import GridStrategy, ValueSurface, extract_strategy_grid, solve_hjb_family
from .simulate import SimOptions, _draw_initial, simulate_mckean_vlasov
from .strategies import FeedbackStrategy


class DivergenceError(RuntimeError):
    """The iteration moved away three times in a row; smallness can genuinely fail."""

    def __init__(self, message: str, history: tuple):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class IterationRecord:
    m_distance: float
    contraction_ratio: float  # nan on the first iteration
    strategy_delta: float     # nan on the first iteration


@dataclass(frozen=True)
class EquilibriumOptions:
    sim: SimOptions
    tol_fp: float | None = None     # absolute; when None, tol_fp_rel * scale is used
    tol_fp_rel: float = 1e-3        # scale = sup over nodes of the second moment
    max_iter: int = 25
    backend: str = "riccati"        # "riccati" for LQ specs, "hjb1d" for general d=1
    damping: float = 1.0            # convex damping of the affine offsets, (0, 1]
    offset_cross_term: str = "value_consistent"
    x_domain: tuple[float, float] | None = None  # hjb1d; derived from the initial cloud if None
    k_x: int = 200

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.backend not in ("riccati", "hjb1d"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass(frozen=True)
class EquilibriumResult:
    mu_star: DistributionCurve
    strategy_star: FeedbackStrategy
    history: tuple[IterationRecord, ...]
    converged: bool
    iterations: int
    seed: int
    tol_fp: float
    backward: RiccatiFamily | ValueSurface | None = None

    @property
    def scale(self) -> float:
        return _curve_scale(self.mu_star)


def _curve_scale(curve: DistributionCurve) -> float:
    pts = curve.stacked()
    return float(np.max(np.mean(np.einsum("knd,knd->kn", pts, pts), axis=1)))


def _strategy_delta(prev: FeedbackStrategy | None, new: FeedbackStrategy) -> float:
    if prev is None:
        return float("nan")
    if isinstance(prev, AffineStrategy) and isinstance(new, AffineStrategy):
        return float(
            np.max(np.abs(prev.gains - new.gains)) + np.max(np.abs(prev.offsets - new.offsets))
        )
    if isinstance(prev, GridStrategy) and isinstance(new, GridStrategy):
        return float(np.max(np.abs(prev.controls - new.controls)))
    return float("nan")


def _hjb_domain(cloud: np.ndarray, spread_factor: float = 8.0) -> tuple[float, float]:
    center = float(cloud.mean())
    sd = float(cloud.std())
    spread = spread_factor * max(sd, 0.25)
    return center - spread, center + spread


def solve_equilibrium(
    spec,
    init_sampler: Callable,
    opts: EquilibriumOptions,
    initial_curve: DistributionCurve | None = None,
) -> EquilibriumResult:
    """Iterate curve -> feedback -> curve until the curve stops moving.

    The starting curve is constant at the initial cloud unless
    ``initial_curve`` warm-starts the iteration (it must live on the options'
    grid).  Divergence (the distance growing three iterations in a row) raises
    :class:`DivergenceError` with the history attached; running out of
    iterations returns an unconverged result with the history populated.
    """
    backend = opts.backend
    if backend == "riccati" and not isinstance(spec, LqModelSpec):
        raise TypeError("the riccati backend needs an LqModelSpec")
    if backend == "hjb1d" and not isinstance(spec, ModelSpec):
        raise TypeError("the hjb1d backend needs a general (d=1) ModelSpec")

    sim = opts.sim
    grid = sim.grid
    x0 = _draw_initial(spec, init_sampler, sim)
    if initial_curve is not None:
        if initial_curve.grid.shape != grid.shape or np.max(np.abs(initial_curve.grid - grid)) > 1e-9:
            raise ValueError("initial_curve must live on the options' time grid")
        mu = initial_curve
    else:
        x0_frozen = x0.copy()
        x0_frozen.setflags(write=False)
        mu = constant_curve(grid, EmpiricalMeasure(x0_frozen))

    x_domain = opts.x_domain
    if backend == "hjb1d" and x_domain is None:
        x_domain = _hjb_domain(x0)

    history: list[IterationRecord] = []
    strategy: FeedbackStrategy | None = None
    backward = None
    prev_offsets = None
    grow_streak = 0
    converged = False
    tol_used = opts.tol_fp if opts.tol_fp is not None else float("nan")

    for _ in range(opts.max_iter):
        if backend == "riccati":
            fam = solve_riccati_family(spec, mu, offset_cross_term=opts.offset_cross_term)
            new_strategy = extract_strategy_lq(fam, spec)
            if opts.damping < 1.0 and prev_offsets is not None:
                new_strategy = AffineStrategy(
                    grid=new_strategy.grid,
                    gains=new_strategy.gains,
                    offsets=opts.damping * new_strategy.offsets + (1.0 - opts.damping) * prev_offsets,
                    label=new_strategy.label,
                )
            prev_offsets = new_strategy.offsets
            backward = fam
        else:
            surface = solve_hjb_family(spec, mu, x_domain=x_domain, k_x=opts.k_x, keep="diagonal")
            new_strategy = extract_strategy_grid(surface, spec)
            backward = surface

        mu_next, _ = simulate_mckean_vlasov(spec, new_strategy, init_sampler, sim)
        d = curve_distance(mu_next, mu)
        ratio = d / history[-1].m_distance if history and history[-1].m_distance > 0 else float("nan")
        history.append(
            IterationRecord(
                m_distance=d,
                contraction_ratio=ratio,
                strategy_delta=_strategy_delta(strategy, new_strategy),
            )
        )
        strategy = new_strategy
        mu = mu_next

        tol_used = opts.tol_fp if opts.tol_fp is not None else opts.tol_fp_rel * _curve_scale(mu)
        if d < tol_used:
            converged = True
            break
        if len(history) >= 2 and d > history[-2].m_distance:
            grow_streak += 1
            if grow_streak >= 3:
                raise DivergenceError(
                    f"distance grew {grow_streak} consecutive iterations (last {d:.3g}); "
                    "the smallness condition for contraction appears violated",
                    history=tuple(history),
                )
        else:
            grow_streak = 0

    return EquilibriumResult(
        mu_star=mu,
        strategy_star=strategy,
        history=tuple(history),
        converged=converged,
        iterations=len(history),
        seed=sim.seed,
        tol_fp=float(tol_used),
        backward=backward,
    )


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyReport:
    m_distance: float
    tol: float
    passed: bool


def consistency_check(
    result: EquilibriumResult,
    spec,
    init_sampler: Callable,
    fresh_seed: int,
    tol: float | None = None,
) -> ConsistencyReport:
    """Re-simulate under the equilibrium strategy with fresh randomness.

    The distance to the stored curve must stay within Monte-Carlo fluctuation
    scale, by default 5 N^{-1/2} times the curve's peak second moment.
    """
    base = result.mu_star
    sim = SimOptions(
        n_particles=base.count,
        n_steps=base.n_nodes - 1,
        horizon=float(base.grid[-1]),
        seed=fresh_seed,
        t0=float(base.grid[0]),
    )
    mu_new, _ = simulate_mckean_vlasov(spec, result.strategy_star, init_sampler, sim)
    d = curve_distance(mu_new, base)
    if tol is None:
        tol = 5.0 * result.scale / np.sqrt(base.count)
    return ConsistencyReport(m_distance=float(d), tol=float(tol), passed=bool(d <= tol))


@dataclass(frozen=True)
class ContractionReport:
    ratios: tuple[float, ...]
    fitted_rate: float
    is_contraction: bool


def contraction_report(history) -> ContractionReport:
    """Ratio sequence and geometric fit of the iteration distances."""
    distances = [rec.m_distance for rec in history]
    if len(distances) < 2:
        raise ValueError("too few iterations for a contraction report")
    ratios = tuple(
        d / prev if prev > 0 else 0.0 for prev, d in zip(distances, distances[1:])
    )
    positive = [d for d in distances if d > 0]
    if len(positive) >= 2:
        ks = np.arange(len(positive))
        slope = np.polyfit(ks, np.log(positive), deg=1)[0]
        fitted = float(np.exp(slope))
    else:
        fitted = ratios[-1]
    return ContractionReport(
        ratios=ratios,
        fitted_rate=fitted,
        is_contraction=all(r < 1.0 for r in ratios),
    )


# ---------------------------------------------------------------------------
# bundle export
# ---------------------------------------------------------------------------

def history_to_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "m_distance", "contraction_ratio", "strategy_delta"])
        for i, rec in enumerate(history, start=1):
            writer.writerow(
                [i, repr(rec.m_distance), repr(rec.contraction_ratio), repr(rec.strategy_delta)]
            )
