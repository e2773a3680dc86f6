"""Open-loop equilibrium strategies for mean-variance investment with random
coefficients, solved exactly on a binary random-walk lattice."""
from .bsde import (
    PositivityError,
    PreconditionError,
    RiccatiSolution,
    SingularityError,
    StepSizeError,
    check_h3,
    compute_phi_star_alternate,
    discount_adjoint,
    solve_equilibrium,
    solve_linear_bsde,
    solve_p_system_given_operator,
    solve_riccati_gamma2_zero,
    solve_riccati_state_dependent,
    solve_script_p_system,
)
from .equilibrium import Strategy, propagate_homogeneous_wealth, propagate_wealth, spike, strategy_values
from .estimator import MeanVarianceEquilibrium
from .lattice import AdaptedProcess, LatticeGrid, LatticeMode, PathDependenceError, build_grid
from .market import HypothesisViolation, MarketModel, Scenario, ScenarioError, build_market, check_hypotheses
from .scenario import bundled_scenarios, parse_scenario, scenario_from_dict
from .verify import (
    PerturbationSpec,
    certify,
    cost_functional,
    expansion_check,
    fixed_point_refine,
    perturbation_quotient,
    quotient_fit,
    representation_check,
    raw_strategy_residual,
    first_order_residuals,
    second_order_coefficient,
    uniqueness_diagnostics,
)

__version__ = "0.1.0"
