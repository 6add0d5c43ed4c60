"""Numerical laboratory for relaxed stochastic control of forward-backward SDEs."""
from .controls import (
    ActionSpace,
    RelaxedControl,
    StrictControl,
    TestFunction,
    TestFunctionFamily,
    TimeGrid,
    averaged_coefficient,
    chattering_approximation,
    dirac_embed,
    pair,
    polynomial_family,
    stable_distance,
)
from .cost import CostReport, bolza_to_mayer, evaluate_cost
from .diagnostics import (
    TightnessReport,
    conditional_variation,
    meyer_zheng_table,
    orthogonal_remainder,
    upcrossings,
)
from .fbsde import (
    CoefficientSet,
    PathEnsemble,
    PicardConfig,
    SmoothFunction,
    apply_generator,
    martingale_residual,
    simulate_forward,
    solve,
    solve_backward_decoupled,
    solve_coupled,
)
from .optimizer import MinimizingTrace, OptimizerConfig, StrictificationReport, minimize_relaxed, strictify
from .regression import RegressionSpec
from .scenario import MODULE_VERSIONS, Scenario, load_scenario, run

__version__ = "0.1.0"
