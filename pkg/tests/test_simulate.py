from __future__ import annotations

import numpy as np
import pytest

from ticmkv.measures import (
    EmpiricalMeasure,
    constant_curve,
    coupling_bound_check,
    curve_distance,
    time_grid,
)
from ticmkv.model import ModelSpec, build_general_catalog, build_lq_catalog
from ticmkv.simulate import (
    PicardError,
    SimOptions,
    SimulationBlowUp,
    gaussian_sampler,
    moment_report,
    picard_iterate_law,
    point_sampler,
    read_paths,
    simulate_frozen,
    simulate_mckean_vlasov,
    simulate_n_player,
    write_paths,
)
from ticmkv.strategies import CallableStrategy, zero_strategy


def ou_model(coupling=0.0, sigma=1.0, control_gain=1.0):
    return build_general_catalog(
        "mean_field_ou", reversion=1.0, coupling=coupling, sigma=sigma, control_gain=control_gain
    )


# ---------------------------------------------------------------------------
# forward law map
# ---------------------------------------------------------------------------

def test_brownian_second_moment_tracks_time():
    model = build_general_catalog("brownian")
    opts = SimOptions(n_particles=10_000, n_steps=100, horizon=1.0, seed=101)
    curve, _ = simulate_mckean_vlasov(model, zero_strategy(), point_sampler(0.0), opts)
    for k in (25, 50, 100):
        t = curve.grid[k]
        second = float(np.mean(curve.node(k).points ** 2))
        stderr = t * np.sqrt(2.0 / opts.n_particles)
        assert abs(second - t) <= 3.0 * stderr


@pytest.mark.parametrize("coupling", [0.0, 0.5])
def test_mean_field_ou_mean_decay(coupling):
    # cloud mean follows dm/dt = (coupling - 1) m from m(0) = 1
    model = ou_model(coupling=coupling)
    opts = SimOptions(n_particles=10_000, n_steps=200, horizon=1.0, seed=33)
    curve, _ = simulate_mckean_vlasov(model, zero_strategy(), point_sampler(1.0), opts)
    for k in (50, 100, 200):
        t = curve.grid[k]
        clou = curve.node(k).points[:, 0]
        expected = np.exp((coupling - 1.0) * t)
        stderr = max(clou.std(ddof=1) / np.sqrt(clou.size), 1e-4)
        assert abs(clou.mean() - expected) <= 3.0 * stderr + 2e-3  # Euler bias O(h)


def test_bit_determinism_and_worker_count_independence():
    model = ou_model(coupling=0.3)
    sampler = gaussian_sampler(1.0, 0.5)
    a = SimOptions(n_particles=500, n_steps=40, horizon=1.0, seed=5, worker_count=1)
    b = SimOptions(n_particles=500, n_steps=40, horizon=1.0, seed=5, worker_count=8)
    _, paths_a = simulate_mckean_vlasov(model, zero_strategy(), sampler, a)
    _, paths_b = simulate_mckean_vlasov(model, zero_strategy(), sampler, b)
    assert np.array_equal(paths_a.values, paths_b.values)
    c = SimOptions(n_particles=500, n_steps=40, horizon=1.0, seed=6)
    _, paths_c = simulate_mckean_vlasov(model, zero_strategy(), sampler, c)
    assert not np.array_equal(paths_a.values, paths_c.values)


def test_shared_noise_coupling_bound_at_every_node():
    model = ou_model(coupling=0.2)
    sampler = gaussian_sampler(0.5, 0.5)
    opts = SimOptions(n_particles=400, n_steps=30, horizon=1.0, seed=17)
    u1 = zero_strategy()
    u2 = CallableStrategy(fn=lambda t, x: 0.4 * (1.0 + np.abs(x[:, 0]))[:, None])
    _, p1 = simulate_mckean_vlasov(model, u1, sampler, opts)
    _, p2 = simulate_mckean_vlasov(model, u2, sampler, opts)
    for k in range(opts.n_steps + 1):
        assert coupling_bound_check(p1.values[k], p2.values[k]).ok


def test_strategy_continuity_slope_near_one():
    # perturb by eps (1 + |x|) under shared noise; distance scales linearly in eps
    model = ou_model(coupling=0.3)
    sampler = gaussian_sampler(0.5, 0.5)
    opts = SimOptions(n_particles=2000, n_steps=50, horizon=1.0, seed=23)
    base, _ = simulate_mckean_vlasov(model, zero_strategy(), sampler, opts)
    eps_values = np.array([0.04, 0.02, 0.01, 0.005])
    dists = []
    for eps in eps_values:
        pert = CallableStrategy(fn=lambda t, x, e=eps: e * (1.0 + np.abs(x[:, 0]))[:, None])
        curve, _ = simulate_mckean_vlasov(model, pert, sampler, opts)
        dists.append(curve_distance(curve, base))
    slope = np.polyfit(np.log(eps_values), np.log(dists), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.15)


def test_blowup_guard_reports_instability():
    model = ModelSpec(
        horizon=1.0,
        drift_state=lambda t, x, m: 60.0 * x,
        drift_control=lambda t, x, v: np.zeros_like(x),
        diffusion=lambda t, x, m: np.ones_like(x),
        running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
        running_cost_control=lambda tau, t, x, v: v * v,
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=lambda t, x, q: np.zeros_like(x),
    )
    opts = SimOptions(n_particles=50, n_steps=400, horizon=1.0, seed=1, blowup_threshold=1e6)
    with pytest.raises(SimulationBlowUp):
        simulate_mckean_vlasov(model, zero_strategy(), point_sampler(1.0), opts)


# ---------------------------------------------------------------------------
# frozen-curve simulation
# ---------------------------------------------------------------------------

def _frozen_setup(n_steps=50, n=200, seed=3):
    model = ou_model(coupling=0.4)
    opts = SimOptions(n_particles=n, n_steps=n_steps, horizon=1.0, seed=seed)
    cloud = EmpiricalMeasure(np.linspace(-1, 1, 64)[:, None])
    frozen = constant_curve(opts.grid, cloud)
    return model, opts, frozen


def test_frozen_zero_costs_gives_zero_samples():
    model, opts, frozen = _frozen_setup()
    samples = simulate_frozen(model, zero_strategy(), frozen, 0.0, 0.0, opts, taus=(0.0,))
    assert np.all(samples.total(0) == 0.0)


def test_frozen_unit_running_cost_is_horizon_minus_start():
    model, opts, frozen = _frozen_setup()
    unit = ModelSpec(
        horizon=1.0,
        drift_state=model.drift_state,
        drift_control=model.drift_control,
        diffusion=model.diffusion,
        running_cost_state=lambda tau, t, x, m: np.ones_like(x),
        running_cost_control=lambda tau, t, x, v: np.zeros_like(x),
        terminal_cost=lambda tau, x, m: np.zeros_like(x),
        best_response=model.best_response,
    )
    t0 = 0.4
    samples = simulate_frozen(unit, zero_strategy(), frozen, t0, 0.3, opts, taus=(t0,))
    assert samples.total(0) == pytest.approx(np.full(opts.n_particles, 1.0 - t0), abs=1e-12)


def test_frozen_off_grid_start_rejected():
    model, opts, frozen = _frozen_setup()
    with pytest.raises(ValueError):
        simulate_frozen(model, zero_strategy(), frozen, 0.505, 0.0, opts)


def test_frozen_curve_too_short_rejected():
    model, opts, _ = _frozen_setup()
    short = constant_curve(
        time_grid(0.0, 0.5, 25), EmpiricalMeasure(np.linspace(-1, 1, 16)[:, None])
    )
    with pytest.raises(ValueError):
        simulate_frozen(model, zero_strategy(), short, 0.0, 0.0, opts)


def test_frozen_accepts_cloud_of_starts():
    model, opts, frozen = _frozen_setup()
    starts = np.linspace(-1, 1, 32)
    samples = simulate_frozen(model, zero_strategy(), frozen, 0.0, starts, opts, taus=(0.0,))
    assert samples.total(0).shape == (32,)


# ---------------------------------------------------------------------------
# Picard cross-check
# ---------------------------------------------------------------------------

def test_picard_law_independent_second_sweep_is_exact():
    model = ou_model(coupling=0.0)
    opts = SimOptions(n_particles=500, n_steps=40, horizon=1.0, seed=11)
    result = picard_iterate_law(model, zero_strategy(), gaussian_sampler(1.0, 0.5), opts, tol=1e-6)
    assert len(result.distances) == 2
    assert result.distances[-1] == 0.0


def test_picard_matches_interacting_simulation_with_shared_seed():
    model = ou_model(coupling=0.5)
    sampler = gaussian_sampler(1.0, 0.5)
    opts = SimOptions(n_particles=10_000, n_steps=100, horizon=1.0, seed=29)
    direct, _ = simulate_mckean_vlasov(model, zero_strategy(), sampler, opts)
    picard = picard_iterate_law(model, zero_strategy(), sampler, opts, tol=1e-5, max_iter=30)
    assert curve_distance(picard.curve, direct) < 1e-3
    ratios = np.array(picard.distances[1:]) / np.array(picard.distances[:-1])
    assert np.all(ratios < 1.0)  # geometric decay of successive sweeps


def test_picard_matches_interacting_on_dissipative_catalog():
    lq = build_lq_catalog("dissipative_meanfield", margin=10.0, coupling=0.5)
    sampler = gaussian_sampler(1.0, 0.5)
    opts = SimOptions(n_particles=10_000, n_steps=100, horizon=1.0, seed=37)
    direct, _ = simulate_mckean_vlasov(lq, zero_strategy(), sampler, opts)
    picard = picard_iterate_law(lq, zero_strategy(), sampler, opts, tol=1e-5, max_iter=30)
    assert curve_distance(picard.curve, direct) < 1e-3


def test_picard_raises_beyond_max_iter():
    model = ou_model(coupling=0.5)
    opts = SimOptions(n_particles=200, n_steps=20, horizon=1.0, seed=2)
    with pytest.raises(PicardError):
        picard_iterate_law(model, zero_strategy(), gaussian_sampler(1.0, 0.5), opts, tol=0.0, max_iter=3)


# ---------------------------------------------------------------------------
# n-player game
# ---------------------------------------------------------------------------

def test_n_player_measure_independent_equals_interacting():
    model = ou_model(coupling=0.0)
    sampler = gaussian_sampler(1.0, 0.5)
    opts = SimOptions(n_particles=300, n_steps=25, horizon=1.0, seed=3)
    solo, _ = simulate_mckean_vlasov(model, zero_strategy(), sampler, opts)
    game = simulate_n_player(model, zero_strategy(), 300, sampler, opts)
    assert curve_distance(game, solo) == 0.0


def test_two_players_uncoupled_match_solo_runs():
    model = ou_model(coupling=0.0)
    sampler = gaussian_sampler(0.0, 1.0)
    opts = SimOptions(n_particles=2, n_steps=25, horizon=1.0, seed=8)
    game = simulate_n_player(model, zero_strategy(), 2, sampler, opts)
    solo, _ = simulate_mckean_vlasov(model, zero_strategy(), sampler, opts)
    assert curve_distance(game, solo) == 0.0


# ---------------------------------------------------------------------------
# diagnostics and dumps
# ---------------------------------------------------------------------------

def test_moment_report_constant_paths():
    from ticmkv.simulate import ParticlePaths

    values = np.zeros((5, 10, 1))
    paths = ParticlePaths(values=values, grid=time_grid(0, 1.0, 4), seed=0)
    rep = moment_report(paths)
    assert rep.sup_second == 0.0 and rep.sup_2plus == 0.0 and rep.holder == 0.0


def test_moment_report_brownian_bounds():
    model = build_general_catalog("brownian")
    opts = SimOptions(n_particles=4000, n_steps=50, horizon=1.0, seed=19)
    _, paths = simulate_mckean_vlasov(model, zero_strategy(), point_sampler(0.0), opts)
    rep = moment_report(paths, delta=1.0)
    assert 1.0 <= rep.sup_second <= 4.0  # Doob's bound caps it at 4 E|W(1)|^2
    assert np.isfinite(rep.sup_2plus)


def test_path_dump_roundtrip(tmp_path):
    model = ou_model()
    opts = SimOptions(n_particles=16, n_steps=8, horizon=1.0, seed=4)
    _, paths = simulate_mckean_vlasov(model, zero_strategy(), point_sampler(0.5), opts)
    f = tmp_path / "paths.bin"
    write_paths(paths, f)
    loaded = read_paths(f, grid=paths.grid)
    assert loaded.seed == paths.seed
    assert np.array_equal(loaded.values, paths.values)


def test_left_endpoint_cost_quadrature_first_order():
    # noiseless LQ problem with decaying state: the integrand varies in time,
    # so the left-endpoint rule error must shrink at order >= 0.9
    lq = build_lq_catalog("time_consistent_baseline", drift=-1.0, state_weight=1.0, sigma=0.0)
    x0 = 1.3

    def cost_at(n_steps):
        opts = SimOptions(n_particles=2, n_steps=n_steps, horizon=1.0, seed=0)
        frozen = constant_curve(opts.grid, EmpiricalMeasure(np.array([[0.0], [1.0]])))
        samples = simulate_frozen(lq, zero_strategy(), frozen, 0.0, x0, opts, taus=(0.0,))
        return float(samples.total(0)[0])

    reference = cost_at(4096)
    errors = [abs(cost_at(k) - reference) for k in (64, 128, 256)]
    orders = [np.log2(errors[i] / errors[i + 1]) for i in range(2)]
    assert min(orders) >= 0.9
