"""Linear-quadratic control of conditional McKean-Vlasov dynamics.

Solver for the backward quadratic-value ODE system, synthesis of the
optimal affine feedback, interacting-particle simulation under common
noise, and numerical certification of the dynamic-programming structure
(Bellman residual, DPP inequality, generator identity, flow property).
"""

from .backends import HAVE_KERNELS, resolve as backend
from .errors import DomainError, NonPositiveGain, NumericalBlowup
from .lqmodel import (
    GainMatrices,
    LqCost,
    LqDynamics,
    check_standing_condition,
    gains,
    lifted_running_cost,
    lifted_terminal_cost,
    load_model,
    save_model,
)
from .measure import AffineMap, EmpiricalMeasure, l2_norm, mean, pushforward, quad_moment, tree_mean, tree_sum, variance_form, w2_1d
from .policy import (
    FeedbackGains,
    FeedbackPolicy,
    QuadraticFunctional,
    QuadraticValue,
    optimal_feedback,
    recover_original,
    value,
    value_derivatives,
)
from .riccati import (
    RiccatiSolution,
    SystemicRiskParams,
    closed_form_lambda,
    delta_pm,
    solve_riccati,
    systemic_risk_model,
)
from .simulator import (
    AffineControl,
    DynamicsSpec,
    FeedbackControl,
    ParticleTrajectory,
    ShiftedControl,
    lq_dynamics_spec,
    pathwise_cost,
    restart_continuation,
    sample_initial,
    simulate_path,
)
from .verify import (
    CostEstimate,
    bellman_residual,
    chaos_convergence,
    dpp_check,
    estimate_cost,
    grad_check,
    ito_generator_check,
)

__version__ = "0.1.0"
