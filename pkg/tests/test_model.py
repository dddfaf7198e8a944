from __future__ import annotations

import warnings

import numpy as np
import pytest

from ticmkv.measures import MomentVector, time_grid
from ticmkv.model import (
    LqModelSpec,
    ModelSpec,
    ParameterError,
    best_response,
    build_general_catalog,
    build_lq_catalog,
    eval_tau_grid,
    lipschitz_probe,
    lq_to_general,
    uniform_control_grid,
)

M0 = MomentVector(mean=np.array([0.5]), second_moment=1.0)


def quadratic_control_model(gain=1.0, weight=1.0, closed_form=True, grid=None) -> ModelSpec:
    return ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: np.zeros_like(x),
        drift_control=lambda t, x, v: gain * v,
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: weight * v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=(lambda t, x, q: -gain * q / (2.0 * weight)) if closed_form else None,
        control_grid=grid,
    )


# ---------------------------------------------------------------------------
# best response
# ---------------------------------------------------------------------------

def test_best_response_doubled_lq_structure():
    # drift 2 B v with cost <v, R v>: minimizer is -R^{-1} B' q
    B, R = 1.5, 2.0
    m = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: np.zeros_like(x),
        drift_control=lambda t, x, v: 2.0 * B * v,
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: R * v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=lambda t, x, q: -B * q / R,
    )
    q = np.array([-1.0, 0.0, 2.0])
    assert best_response(m, 0.3, np.zeros(3), q) == pytest.approx(-B * q / R, abs=1e-10)


def test_best_response_analytic_scalar():
    # drift v, cost v^2: argmin of q v + v^2 is -q/2
    m = quadratic_control_model()
    q = np.array([3.0, -1.0])
    assert best_response(m, 0.0, np.zeros(2), q) == pytest.approx([-1.5, 0.5])
    assert best_response(m, 0.0, np.zeros(2), np.zeros(2)) == pytest.approx([0.0, 0.0])


def test_best_response_grid_matches_closed_form_within_spacing():
    grid = uniform_control_grid(-3.0, 3.0, 601)
    m = quadratic_control_model(closed_form=False, grid=grid)
    q = np.linspace(-2, 2, 9)
    got = best_response(m, 0.0, np.zeros(9), q)
    assert np.max(np.abs(got - (-q / 2))) <= (grid[1] - grid[0]) / 2 + 1e-12


def test_best_response_grid_tie_break_smallest_index():
    # objective q*v with q = 0 is flat: the first grid point must win
    m = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: np.zeros_like(x),
        drift_control=lambda t, x, v: v,
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: np.zeros_like(x),
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        control_grid=np.array([-1.0, 0.0, 1.0]),
    )
    assert best_response(m, 0.0, np.zeros(2), np.zeros(2)) == pytest.approx([-1.0, -1.0])


def test_best_response_invariant_to_constant_cost_shift():
    grid = uniform_control_grid(-2.0, 2.0, 201)
    base = quadratic_control_model(closed_form=False, grid=grid)
    shifted = ModelSpec(
        horizon=1.0,
        drift_state=base.drift_state,
        drift_control=base.drift_control,
        diffusion=base.diffusion,
        running_cost_state=base.running_cost_state,
        running_cost_control=lambda tau, t, x, v: v * v + 17.5,
        terminal_cost=base.terminal_cost,
        control_grid=grid,
    )
    q = np.linspace(-1.5, 1.5, 7)
    a = best_response(base, 0.2, np.zeros(7), q)
    b = best_response(shifted, 0.2, np.zeros(7), q)
    assert a == pytest.approx(b, abs=0)


def test_best_response_requires_grid_or_closed_form():
    m = quadratic_control_model(closed_form=False, grid=None)
    with pytest.raises(ParameterError):
        best_response(m, 0.0, np.zeros(2), np.zeros(2))


def test_best_response_rejects_non_finite_objective():
    m = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: np.zeros_like(x),
        drift_control=lambda t, x, v: v,
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: np.where(v > 0, np.inf, v * v),
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        control_grid=np.array([-1.0, 1.0]),
    )
    with pytest.raises(ParameterError):
        best_response(m, 0.0, np.zeros(1), np.ones(1))


# ---------------------------------------------------------------------------
# LQ catalog
# ---------------------------------------------------------------------------

def test_baseline_catalog_is_tau_independent():
    lq = build_lq_catalog("time_consistent_baseline")
    assert np.allclose(lq.Q_at(0.2, 0.9), lq.Q_at(0.9, 0.9))
    assert np.allclose(lq.R_at(0.1, 0.5), np.eye(1))
    assert np.allclose(lq.G_at(0.0), lq.G_at(1.0))
    lq.validate(time_grid(0.0, 1.0, 16))


def test_dissipative_catalog_spectrum_and_params():
    lq = build_lq_catalog("dissipative_meanfield", margin=10.0)
    assert np.allclose(lq.A_at(0.3), -10.0 * np.eye(1))
    assert lq.dissipativity_margin == 10.0
    with pytest.raises(ParameterError):
        build_lq_catalog("dissipative_meanfield", margin=-1.0)
    with pytest.raises(ParameterError):
        build_lq_catalog("dissipative_meanfield", nonsense=1.0)
    with pytest.raises(ParameterError):
        build_lq_catalog("no_such_problem")


def test_dissipative_forcing_couples_to_mean():
    lq = build_lq_catalog("dissipative_meanfield", coupling=0.5)
    assert lq.forcing_at(0.0, M0) == pytest.approx([0.25])


def test_tau_weighted_terminal_endpoints():
    g = 2.0
    lq = build_lq_catalog("tau_weighted_terminal", terminal_weight=g)
    assert lq.G_at(0.0)[0, 0] == pytest.approx(np.exp(-1.0) * g)
    assert lq.G_at(1.0)[0, 0] == pytest.approx(g)


def test_lq_validate_catches_bad_weights():
    lq = build_lq_catalog("time_consistent_baseline")
    broken = LqModelSpec(
        dim=1,
        control_dim=1,
        horizon=1.0,
        A=lq.A,
        B=lq.B,
        forcing=lq.forcing,
        noise=lq.noise,
        Q=lq.Q,
        R=lambda tau, t: np.zeros((1, 1)),
        G=lq.G,
    )
    with pytest.raises(ParameterError):
        broken.validate(time_grid(0.0, 1.0, 8))


def test_eval_tau_grid_vectorized_and_fallback():
    taus = np.linspace(0, 1, 5)
    vectorized = lambda tau, t: np.broadcast_to(np.eye(1), (np.size(tau), 1, 1)) * np.asarray(
        tau
    ).reshape(-1, 1, 1)
    scalar_only = lambda tau, t: float(tau) * np.eye(1)
    a = eval_tau_grid(vectorized, taus, 0.5, (1, 1))
    b = eval_tau_grid(scalar_only, taus, 0.5, (1, 1))
    assert np.allclose(a, b)


# ---------------------------------------------------------------------------
# general catalog and the LQ view
# ---------------------------------------------------------------------------

def test_general_catalog_names():
    for name in ("brownian", "mean_field_ou", "sin_drift"):
        m = build_general_catalog(name)
        assert m.dim == 1
    with pytest.raises(ParameterError):
        build_general_catalog("unknown")
    with pytest.raises(ParameterError):
        build_general_catalog("sin_drift", sigma=0.0)


def test_lq_to_general_agrees_with_lq_costs():
    lq = build_lq_catalog("dissipative_meanfield", margin=5.0, coupling=0.3)
    gm = lq_to_general(lq)
    x = np.array([[0.7], [-0.4]])
    u = np.array([[0.2], [-0.1]])
    assert gm.drift(0.3, x, M0, u) == pytest.approx(lq.drift(0.3, x, M0, u))
    assert gm.running_cost(0.1, 0.3, x, u, M0) == pytest.approx(lq.running_cost(0.1, 0.3, x, u, M0))
    assert gm.terminal_cost_values(0.1, x, M0) == pytest.approx(lq.terminal_cost_values(0.1, x, M0))
    # best response reproduces the affine feedback given the value gradient 2(Px + p)
    P, p = 0.4, 0.1
    q = 2.0 * (P * x[:, 0] + p)
    want = -(1.0 / lq.R_at(0.3, 0.3)[0, 0]) * lq.B_at(0.3)[0, 0] * (P * x[:, 0] + p)
    assert best_response(gm, 0.3, x[:, 0], q) == pytest.approx(want)


def test_lq_to_general_rejects_matrix_problems():
    with pytest.raises(ParameterError):
        lq_to_general(build_lq_catalog("dissipative_meanfield", dim=2))


# ---------------------------------------------------------------------------
# lipschitz probe
# ---------------------------------------------------------------------------

def test_lipschitz_probe_linear_drift():
    m = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: 2.0 * x,
        drift_control=lambda t, x, v: np.zeros_like(x),
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=lambda t, x, q: np.zeros_like(x),
        lipschitz_coeff=2.0,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = lipschitz_probe(m, n_samples=300, seed=1)
    assert rep.drift == pytest.approx(2.0, rel=1e-9)
    assert rep.diffusion == 0.0


def test_lipschitz_probe_constant_coefficients():
    m = build_general_catalog("brownian")
    rep = lipschitz_probe(m, n_samples=100, seed=2)
    assert rep.drift == 0.0 and rep.diffusion == 0.0 and rep.best_response == 0.0


def test_lipschitz_probe_sine_drift_bounded_by_one():
    m = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: np.sin(x),
        drift_control=lambda t, x, v: np.zeros_like(x),
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=lambda t, x, q: np.zeros_like(x),
    )
    rep = lipschitz_probe(m, n_samples=500, seed=3)
    assert rep.drift <= 1.0 + 1e-6


def test_lipschitz_probe_warns_when_declared_constant_exceeded():
    m = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: 3.0 * x,
        drift_control=lambda t, x, v: np.zeros_like(x),
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=lambda t, x, q: np.zeros_like(x),
        lipschitz_coeff=1.0,
    )
    with pytest.warns(UserWarning):
        lipschitz_probe(m, n_samples=200, seed=4)
