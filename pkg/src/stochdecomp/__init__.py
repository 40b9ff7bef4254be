"""Price and resource decomposition for multistage stochastic problems on coupled units.

Units are tabulated on lattices and solved by per-unit dynamic
programming.  Price coordination gives lower bounds, resource coordination
gives upper bounds, and the value tables of either define admissible
policies that can be evaluated exactly or by Monte Carlo.
"""
from .coordination import (
    BoundReport,
    InfeasibleError,
    OuterOptions,
    admissible_resource_grid,
    lower_bound,
    maximize_lower_bound,
    minimize_upper_bound,
    price_gradient,
    resource_gradient,
    suggest_resource,
    upper_bound,
)
from .localdp import (
    FeedbackTable,
    ValueTable,
    interp,
    solve_price_dp,
    solve_resource_dp,
    solve_unconstrained_dp,
)
from .model import (
    CoordinationKind,
    CoordinationProcess,
    CouplingSubspace,
    DiscreteDistribution,
    InadmissibleError,
    InformationStructure,
    Lattice,
    ModelError,
    NoiseModel,
    ProblemInstance,
    TimeGrid,
    UnitSpec,
    project_price,
    project_resource,
    validate_instance,
)
from .oracle import (
    OracleBudget,
    decentralized_bruteforce,
    global_dp,
    static_bounds,
)
from .policy import (
    BudgetExceeded,
    PolicyInfeasible,
    PolicyKind,
    PolicySpec,
    SimulationReport,
    evaluate_policy_exact,
    policy_step,
    simulate_policy,
)

__version__ = "0.1.0"
