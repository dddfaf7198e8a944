"""Closed-loop equilibria for time-inconsistent McKean-Vlasov control.

The package couples a forward interacting-particle simulation (strategy to
distribution curve) with a backward solve (curve to locally optimal feedback)
and iterates their composition to a fixed point, then certifies the result:
re-simulation consistency, contraction diagnostics, and a spike-variation
test of local optimality.
"""
from .measures import (
    DistributionCurve,
    EmpiricalMeasure,
    MomentCurve,
    MomentVector,
    coupling_bound_check,
    curve_distance,
    holder_profile,
    moments,
    wasserstein2,
)
from .model import (
    LqModelSpec,
    ModelSpec,
    best_response,
    build_general_catalog,
    build_lq_catalog,
    lipschitz_probe,
    lq_to_general,
)
from .simulate import (
    SimOptions,
    gaussian_sampler,
    moment_report,
    picard_iterate_law,
    point_sampler,
    simulate_frozen,
    simulate_mckean_vlasov,
    simulate_n_player,
)
from .riccati import RiccatiFamily, extract_strategy_lq, solve_riccati_family, value_lq
from .hjb1d import ValueSurface, extract_strategy_grid, regularity_report, solve_hjb_family
from .equilibrium import (
    EquilibriumOptions,
    EquilibriumResult,
    consistency_check,
    contraction_report,
    solve_equilibrium,
)
from .verify import estimate_cost_j, solve_classical_lq, spike_test, time_consistent_reduction_check

__version__ = "0.1.0"
