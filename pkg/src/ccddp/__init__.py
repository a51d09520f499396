"""Chance-constrained differential dynamic programming for safe trajectory
optimization and receding-horizon control.

The library couples a constrained DDP core (KKT-modified feedback gains, a
small dense QP per forward-pass step) with closed-loop covariance propagation
so probabilistic constraints become deterministic margin-tightened ones, plus
an MPC execution loop and a Monte Carlo safety harness.
"""

__version__ = "0.1.0"

from .chance import CovarianceSequence, propagate, retighten
from .constraints import (
    AffineConstraint,
    ConstraintSet,
    Linearization,
    ObstacleConstraint,
    TightenedConstraintSet,
    inv_normal_cdf,
    tighten,
    untightened,
)
from .cost import CostModel
from .ddp import (
    BackwardData,
    DdpOptions,
    QModel,
    SolveResult,
    Trajectory,
    ValueModel,
    backward_pass,
    constrained_gains,
    forward_pass,
    initial_trajectory,
    q_derivatives,
    rollout,
    select_active_rows,
    solve,
    unconstrained_gains,
)
from .dynamics import DynamicsModel, finite_difference_jacobians, hover_controls, make_model
from .errors import ConfigurationError, NumericalError, SolverError
from .harness import MetricsRow, compute_metrics, run_monte_carlo
from .mpc import (
    EpisodeResult,
    Scenario,
    episode_rng,
    initialize,
    mpc_step,
    run_episode,
    shift_trajectory,
    unconstrained_ddp,
)
from .qp import QpProblem, QpSolution, kkt_residual, solve_qp
from .scenarios import load_scenario, save_scenario, scenario_from_dict

__all__ = [
    "AffineConstraint",
    "BackwardData",
    "ConfigurationError",
    "ConstraintSet",
    "CostModel",
    "CovarianceSequence",
    "DdpOptions",
    "DynamicsModel",
    "EpisodeResult",
    "Linearization",
    "MetricsRow",
    "NumericalError",
    "ObstacleConstraint",
    "QModel",
    "QpProblem",
    "QpSolution",
    "Scenario",
    "SolveResult",
    "SolverError",
    "TightenedConstraintSet",
    "Trajectory",
    "ValueModel",
    "backward_pass",
    "compute_metrics",
    "constrained_gains",
    "episode_rng",
    "finite_difference_jacobians",
    "forward_pass",
    "hover_controls",
    "initial_trajectory",
    "initialize",
    "inv_normal_cdf",
    "kkt_residual",
    "load_scenario",
    "make_model",
    "mpc_step",
    "propagate",
    "q_derivatives",
    "retighten",
    "rollout",
    "run_episode",
    "run_monte_carlo",
    "save_scenario",
    "scenario_from_dict",
    "select_active_rows",
    "shift_trajectory",
    "solve",
    "solve_qp",
    "tighten",
    "unconstrained_ddp",
    "unconstrained_gains",
    "untightened",
]
