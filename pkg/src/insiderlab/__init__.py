"""Simulation and verification lab for optimal insider control of stochastic
delay systems: conditional kernel weights for first-chaos Gaussian inside
information, time-advanced linear adjoint BSDEs solved by backward interval
recursion, anticipating (forward-integral) wealth simulation, and Monte Carlo
verification of the optimality conditions.
"""
from .donsker import (
    GaussianInsiderSpec,
    KernelValue,
    conditional_density,
    conditional_derivative,
    information_drift,
    information_state,
    kernel_value,
    pair_expectation_quadrature,
)
from .harvesting import (
    HarvestAdjoint,
    HarvestParams,
    HarvestReport,
    harvest_report,
    optimal_harvest_control,
    optimal_harvest_policy,
    solve_harvest_adjoint,
)
from .maxprinciple import (
    AdjointPath,
    DelayControlProblem,
    HamiltonianInputs,
    LinearAdvancedGenerator,
    PerturbationSpec,
    absde_residual,
    adjoint_drift_mu,
    advance_factor,
    hamiltonian,
    performance_J_total,
    performance_diff,
    performance_j,
    solve_linear_absde,
    verify_perturbation,
    verify_stationarity,
)
from .paths import (
    BrownianPath,
    JumpPath,
    MarkLaw,
    MCEstimate,
    SeedPolicy,
    TimeGrid,
    mc_aggregate,
    sample_brownian,
    sample_brownian_paths,
    sample_jumps,
)
from .portfolio import (
    MarketParams,
    PortfolioPolicy,
    admissibility_check,
    expected_log_utility_analytic,
    expected_log_wealth_mc,
    optimal_portfolio,
    optimal_portfolio_policy,
    simulate_log_wealth,
    simulate_wealth_euler,
    viability_sweep,
)
from .sdde import (
    ControlPolicy,
    ModelCoefficients,
    SegmentedState,
    VariationalState,
    first_hit_zero,
    forward_integral_epsilon,
    simulate_sdde,
    simulate_variational,
)

__version__ = "0.1.0"
