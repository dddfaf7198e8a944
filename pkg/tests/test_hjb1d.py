from __future__ import annotations

import numpy as np
import pytest

from ticmkv.hjb1d import (
    DegenerateDiffusionError,
    GridStrategy,
    MonotonicityError,
    ValueSurface,
    diag_grad_to_csv,
    extract_strategy_grid,
    regularity_report,
    solve_hjb_family,
    surface_to_csv,
)
from ticmkv.measures import EmpiricalMeasure, constant_curve, curve_distance, time_grid
from ticmkv.model import ModelSpec, build_general_catalog, build_lq_catalog, lq_to_general
from ticmkv.verify import solve_classical_lq


def small_cloud(mean=0.0, sd=0.5, n=256, seed=5):
    gen = np.random.default_rng(seed)
    return EmpiricalMeasure(mean + sd * gen.standard_normal((n, 1)))


def base_model(**overrides):
    fields = dict(
        horizon=1.0,
        drift_state=lambda t, x, m: np.zeros_like(x),
        drift_control=lambda t, x, v: v,
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=lambda t, x, q: -0.5 * q,
    )
    fields.update(overrides)
    return ModelSpec(**fields)


def frozen(n_steps=50, horizon=1.0, **cloud_kwargs):
    return constant_curve(time_grid(0.0, horizon, n_steps), small_cloud(**cloud_kwargs))


# ---------------------------------------------------------------------------
# exact solutions
# ---------------------------------------------------------------------------

def test_zero_costs_give_zero_surface_and_strategy():
    model = base_model()
    surf = solve_hjb_family(model, frozen(), x_domain=(-3, 3), k_x=60)
    assert np.max(np.abs(surf.diag)) == 0.0
    assert np.max(np.abs(surf.diag_grad)) == 0.0
    strat = extract_strategy_grid(surf, model)
    assert np.max(np.abs(strat.controls)) == 0.0


def test_constant_source_is_exact():
    model = base_model(
        drift_control=lambda t, x, v: np.zeros_like(x),
        running_cost_state=lambda tau, t, x, m: np.ones_like(x),
        running_cost_control=lambda tau, t, x, v: np.zeros_like(x),
        best_response=lambda t, x, q: np.zeros_like(x),
    )
    surf = solve_hjb_family(model, frozen(n_steps=40), x_domain=(-3, 3), k_x=50, keep="full")
    expected = (1.0 - surf.grid)[:, None]
    assert np.max(np.abs(surf.diag - expected)) <= 1e-10
    for j in (0, 10, 30):
        for k in (j, 20, 40):
            if k < j:
                continue
            assert surf.theta(j, k) == pytest.approx(
                np.full_like(surf.x_grid, 1.0 - surf.grid[k]), abs=1e-10
            )


def test_diag_grad_matches_classical_lq_gradient():
    lq = build_lq_catalog("time_consistent_baseline", state_weight=0.5)
    model = lq_to_general(lq)
    mu = frozen(n_steps=100)
    surf = solve_hjb_family(model, mu, x_domain=(-4, 4), k_x=100, keep="diagonal")
    classical = solve_classical_lq(lq, mu)
    x = surf.x_grid
    inner = (x >= -2.0) & (x <= 2.0)
    exact = 2.0 * classical.P[:, 0, 0][:, None] * x[None, :] + 2.0 * classical.p[:, 0][:, None]
    rel = np.abs(surf.diag_grad[:, inner] - exact[:, inner]).max() / np.abs(exact[:, inner]).max()
    assert rel <= 0.015


def test_grid_strategy_matches_affine_feedback_on_inner_domain():
    lq = build_lq_catalog("time_consistent_baseline", state_weight=0.5)
    model = lq_to_general(lq)
    mu = frozen(n_steps=100)
    surf = solve_hjb_family(model, mu, x_domain=(-4, 4), k_x=100, keep="diagonal")
    strat = extract_strategy_grid(surf, model)
    classical = solve_classical_lq(lq, mu)
    x = np.linspace(-2, 2, 9)[:, None]
    for k in (0, 50, 100):
        t = float(surf.grid[k])
        want = x[:, 0] * classical.gains[k, 0, 0] + classical.offsets[k, 0]
        got = strat(t, x)[:, 0]
        assert np.max(np.abs(got - want)) <= 0.03 * max(1.0, np.abs(want).max())


# ---------------------------------------------------------------------------
# monotone-scheme properties
# ---------------------------------------------------------------------------

def test_comparison_principle_under_frozen_gradient():
    gen = np.random.default_rng(7)
    bump_levels = gen.uniform(0.1, 1.0, size=3)
    source = lambda t, xs: 0.3 * xs  # fixed strategy source for both solves
    lo = base_model(
        drift_state=lambda t, x, m: np.sin(x),
        running_cost_state=lambda tau, t, x, m: 0.5 * x * x,
        terminal_cost=lambda tau, x, m: 0.2 * x * x,
    )
    surf_lo = solve_hjb_family(lo, frozen(), x_domain=(-3, 3), k_x=60, gradient_source=source, keep="full")
    for c in bump_levels:
        hi = base_model(
            drift_state=lo.drift_state,
            running_cost_state=lambda tau, t, x, m, c=c: 0.5 * x * x + c * (1.0 + np.cos(x) ** 2),
            terminal_cost=lambda tau, x, m, c=c: 0.2 * x * x + c,
        )
        surf_hi = solve_hjb_family(hi, frozen(), x_domain=(-3, 3), k_x=60, gradient_source=source, keep="full")
        assert np.all(surf_hi.full[~np.isnan(surf_hi.full)] >= surf_lo.full[~np.isnan(surf_lo.full)] - 1e-12)


def test_nonnegative_costs_give_nonnegative_values():
    model = base_model(
        drift_state=lambda t, x, m: np.sin(x),
        running_cost_state=lambda tau, t, x, m: (x - 0.3) ** 2 / (1.0 + (t - tau)),
        terminal_cost=lambda tau, x, m: np.abs(x),
    )
    surf = solve_hjb_family(model, frozen(), x_domain=(-3, 3), k_x=60, keep="full")
    assert np.nanmin(surf.full) >= -1e-9


def test_measure_sensitivity_slope_near_one():
    model = build_general_catalog("sin_drift", coupling=0.8, amplitude=0.5)
    grid = time_grid(0.0, 1.0, 60)
    base_curve = constant_curve(grid, small_cloud(mean=0.0))
    surf0 = solve_hjb_family(model, base_curve, x_domain=(-4, 4), k_x=80, keep="diagonal")
    inner = (surf0.x_grid >= -2) & (surf0.x_grid <= 2)
    gaps, sens = [], []
    for eps in (0.4, 0.2, 0.1, 0.05):
        shifted = constant_curve(grid, small_cloud(mean=eps))
        surf1 = solve_hjb_family(model, shifted, x_domain=(-4, 4), k_x=80, keep="diagonal")
        num = np.abs(surf1.diag_grad - surf0.diag_grad)[:, inner]
        den = 1.0 + np.abs(surf0.x_grid[inner])[None, :]
        sens.append(float(np.max(num / den)))
        gaps.append(curve_distance(base_curve, shifted))
    slope = np.polyfit(np.log(gaps), np.log(sens), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_self_convergence_on_nonlinear_catalog_model():
    model = build_general_catalog("sin_drift", amplitude=1.0, coupling=0.3, discount=1.0)
    cloud = small_cloud(mean=0.2)
    diags = {}
    for n in (50, 100, 200):
        mu = constant_curve(time_grid(0.0, 1.0, n), cloud)
        surf = solve_hjb_family(model, mu, x_domain=(-4, 4), k_x=n, keep="diagonal")
        diags[n] = surf.diag
    # shared nodes: every 2nd time and space node of the finer grid
    e1 = np.max(np.abs(diags[100][::2, ::2] - diags[50]))
    e2 = np.max(np.abs(diags[200][::2, ::2] - diags[100]))
    assert e2 <= 0.65 * e1


# ---------------------------------------------------------------------------
# guards
# ---------------------------------------------------------------------------

def test_measure_coupled_diffusion_channel():
    # dX = sigma(mean) dW with terminal x^2: value at (t=0, x=0) is sigma^2 T
    model = base_model(
        drift_control=lambda t, x, v: np.zeros_like(x),
        diffusion=lambda t, x, m: 0.5 + 0.5 * np.abs(np.asarray(m.mean)[..., 0]) + 0.0 * x,
        running_cost_control=lambda tau, t, x, v: np.zeros_like(x),
        terminal_cost=lambda tau, x, m: x * x,
        best_response=lambda t, x, q: np.zeros_like(x),
    )
    grid = time_grid(0.0, 1.0, 50)
    values = {}
    for mean in (0.0, 1.0):
        cloud = EmpiricalMeasure(np.full((8, 1), mean))
        surf = solve_hjb_family(
            model, constant_curve(grid, cloud), x_domain=(-4, 4), k_x=80, keep="diagonal"
        )
        i0 = int(np.argmin(np.abs(surf.x_grid)))
        values[mean] = float(surf.diag[0, i0])
    assert values[0.0] == pytest.approx(0.25, abs=5e-3)
    assert values[1.0] == pytest.approx(1.0, abs=3e-2)


def test_degenerate_diffusion_rejected():
    model = base_model(diffusion=lambda t, x, m: np.zeros_like(x))
    with pytest.raises(DegenerateDiffusionError):
        solve_hjb_family(model, frozen(), x_domain=(-3, 3), k_x=40)


def test_monotonicity_bound_violation_reports_required_dt():
    model = base_model(drift_state=lambda t, x, m: 30.0 * x)
    with pytest.raises(MonotonicityError) as err:
        solve_hjb_family(model, frozen(n_steps=20), x_domain=(-3, 3), k_x=60)
    assert err.value.required_dt < 1.0 / 20


def test_dimension_and_keep_guards():
    model = base_model()
    with pytest.raises(ValueError):
        solve_hjb_family(model, frozen(), x_domain=(3, -3), k_x=40)
    with pytest.raises(ValueError):
        solve_hjb_family(model, frozen(), x_domain=(-3, 3), k_x=4)
    surf = solve_hjb_family(model, frozen(), x_domain=(-3, 3), k_x=40, keep="diagonal")
    with pytest.raises(ValueError):
        surf.theta(0, 5)


# ---------------------------------------------------------------------------
# gridded strategy and diagnostics
# ---------------------------------------------------------------------------

def test_grid_strategy_clamps_outside_domain():
    model = base_model(terminal_cost=lambda tau, x, m: x * x)
    surf = solve_hjb_family(model, frozen(), x_domain=(-2, 2), k_x=40, keep="diagonal")
    strat = extract_strategy_grid(surf, model)
    at_edge = strat(0.5, np.array([[2.0]]))
    beyond = strat(0.5, np.array([[7.0]]))
    assert beyond == pytest.approx(at_edge)


def test_grid_strategy_csv_roundtrip(tmp_path):
    model = base_model(terminal_cost=lambda tau, x, m: x * x)
    surf = solve_hjb_family(model, frozen(n_steps=20), x_domain=(-2, 2), k_x=24, keep="diagonal")
    strat = extract_strategy_grid(surf, model)
    f = tmp_path / "grid.csv"
    strat.to_csv(f)
    loaded = GridStrategy.from_csv(f)
    assert np.allclose(loaded.controls, strat.controls)
    x = np.array([[0.31], [-1.7]])
    assert loaded(0.43, x) == pytest.approx(strat(0.43, x))


def test_regularity_report_exact_quadratic():
    grid = time_grid(0.0, 1.0, 4)
    x = np.linspace(-2, 2, 41)
    diag = np.tile(x * x, (5, 1))
    grad = np.tile(2 * x, (5, 1))
    surf = ValueSurface(
        grid=grid, x_grid=x, diag=diag, diag_grad=grad, full=None, drift_bound=0.0, required_dt=np.inf
    )
    rep = regularity_report(surf)
    assert rep.second_derivative_sup == pytest.approx(2.0, abs=1e-8)
    assert rep.grad_at_center == pytest.approx(0.0, abs=1e-12)
    assert rep.diag_grad_lipschitz == pytest.approx(2.0, abs=1e-8)


def test_regularity_report_zero_surface():
    grid = time_grid(0.0, 1.0, 3)
    x = np.linspace(-1, 1, 11)
    z = np.zeros((4, 11))
    surf = ValueSurface(grid=grid, x_grid=x, diag=z, diag_grad=z, full=None, drift_bound=0.0, required_dt=np.inf)
    rep = regularity_report(surf)
    assert rep.second_derivative_sup == 0.0 and rep.grad_at_center == 0.0


def test_regularity_second_derivative_tracks_quadratic_coefficient():
    lq = build_lq_catalog("time_consistent_baseline", state_weight=0.5)
    model = lq_to_general(lq)
    mu = frozen(n_steps=100)
    surf = solve_hjb_family(model, mu, x_domain=(-4, 4), k_x=100, keep="diagonal")
    classical = solve_classical_lq(lq, mu)
    want = 2.0 * np.max(np.abs(classical.P[:, 0, 0]))
    rep = regularity_report(surf)
    assert rep.second_derivative_sup == pytest.approx(want, rel=0.05)


def test_surface_csv_exports(tmp_path):
    model = base_model(terminal_cost=lambda tau, x, m: x * x)
    surf = solve_hjb_family(model, frozen(n_steps=10), x_domain=(-2, 2), k_x=12, keep="full")
    f1 = tmp_path / "surface.csv"
    f2 = tmp_path / "grad.csv"
    surface_to_csv(surf, f1, stride_t=2, stride_x=3)
    diag_grad_to_csv(surf, f2)
    assert f1.read_text().splitlines()[0] == "tau,t,x,value"
    assert f2.read_text().splitlines()[0] == "t,x,diag_grad"
