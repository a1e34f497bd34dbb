"""Goal-oriented optimal sensor placement with correlated observation errors.

Observation precisions are reweighted through a Hadamard product with a
design-dependent kernel matrix, which keeps correlations between active
sensors intact while switching sensors on and off.
"""

__version__ = "0.1.0"

from .bayes import (  # noqa: E402
    ForwardModel,
    GoalOperator,
    IndefiniteHessian,
    InverseProblem,
    Prior,
    goal_posterior_cov,
    lowrank_hessian_inverse,
    map_estimate,
)
from .criteria import (  # noqa: E402
    CriterionSpec,
    a_criterion,
    a_gradient,
    d_criterion,
    d_gradient,
    gradient_check,
    oed_objective,
    penalty,
)
from .kernels import SpaceTimeCovariance, WeightKernelSpec  # noqa: E402
from .optimize import (  # noqa: E402
    OEDResult,
    OptimizerConfig,
    brute_force_enumerate,
    continuation,
    random_baseline,
    solve_oed,
    threshold_to_budget,
)

__all__ = [
    "ForwardModel", "GoalOperator", "IndefiniteHessian", "InverseProblem", "Prior",
    "goal_posterior_cov", "lowrank_hessian_inverse", "map_estimate",
    "CriterionSpec", "a_criterion", "a_gradient", "d_criterion", "d_gradient",
    "gradient_check", "oed_objective", "penalty",
    "SpaceTimeCovariance", "WeightKernelSpec",
    "OEDResult", "OptimizerConfig", "brute_force_enumerate", "continuation",
    "random_baseline", "solve_oed", "threshold_to_budget",
]
