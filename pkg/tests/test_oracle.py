import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochdecomp.coordination import admissible_resource_grid, upper_bound
from stochdecomp.localdp import solve_unconstrained_dp
from stochdecomp.microgrid import enumeration_instance, random_storage_instance
from stochdecomp.model import (
    CoordinationKind,
    CoordinationProcess,
    CouplingSubspace,
    InadmissibleError,
    InformationStructure,
    ModelError,
)
from stochdecomp.oracle import (
    GenericProblem,
    OracleBudget,
    OracleReport,
    decentralized_bruteforce,
    global_dp,
    random_generic_problem,
    scenario_tree_value,
    static_bounds,
)
from stochdecomp.policy import BudgetExceeded

from conftest import toy_instance, toy_unit


def test_single_unit_oracle_equals_local_dp():
    inst = random_storage_instance(np.random.default_rng(4), 1, 3, fractional=True)
    inst = inst.replace(coupling=CouplingSubspace.uncoupled([1]))
    g = global_dp(inst)
    v, _ = solve_unconstrained_dp(inst.tabulation[0])
    for a, b in zip(g.values, v.values):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_uncoupled_oracle_is_separable():
    rng = np.random.default_rng(8)
    inst = random_storage_instance(rng, 2, 2, fractional=True)
    free = inst.replace(coupling=CouplingSubspace.uncoupled([1, 1]))
    parts = [solve_unconstrained_dp(tab)[0].values[0][free.x0_index(i)]
             for i, tab in enumerate(free.tabulation)]
    assert abs(global_dp(free).value - sum(parts)) <= 1e-12


@given(st.integers(0, 10_000))
def test_scenario_tree_cross_check(seed):
    rng = np.random.default_rng(seed)
    inst = random_storage_instance(rng, int(rng.integers(1, 4)), 2, fractional=seed % 2 == 0)
    a, b = global_dp(inst).value, scenario_tree_value(inst)
    assert a == b or abs(a - b) <= 1e-12


def test_oracle_budget_is_enforced(meso6):
    with pytest.raises(BudgetExceeded, match="joint control points"):
        global_dp(meso6)
    with pytest.raises(ModelError):
        OracleBudget(max_states=0)


def test_global_dp_rejects_decentralized_instances():
    with pytest.raises(ModelError):
        global_dp(enumeration_instance(InformationStructure.DECENTRALIZED))


def test_static_bounds_example():
    z = np.array([-1.0, 0.0, 1.0])
    prob = GenericProblem([z**2, z**2], [z[:, None], z[:, None]], np.array([[1.0, 1.0]]))
    for c in (-2.0, 0.0, 0.7):
        out = static_bounds(prob, [c, c], [0.0, 0.0])
        assert out.exact == 0.0
        assert out.upper == 0.0
        assert out.lower <= 0.0


def test_static_bounds_rejects_inadmissible_inputs():
    z = np.array([-1.0, 0.0, 1.0])
    prob = GenericProblem([z**2, z**2], [z[:, None], z[:, None]], np.array([[1.0, 1.0]]))
    with pytest.raises(InadmissibleError):
        static_bounds(prob, [1.0, 0.0], [0.0, 0.0])
    with pytest.raises(InadmissibleError):
        static_bounds(prob, [0.0, 0.0], [1.0, 1.0])


@given(st.integers(0, 100_000))
def test_static_sandwich_on_random_problems(seed):
    rng = np.random.default_rng(seed)
    prob, p, r = random_generic_problem(rng, int(rng.integers(2, 4)), 4, int(rng.integers(1, 3)))
    out = static_bounds(prob, p, r)
    assert out.lower <= out.exact + 1e-9 <= out.upper + 2e-9


def test_enumeration_instance_values():
    central = enumeration_instance()
    vc = global_dp(central).value
    assert abs(vc - 1.15) <= 1e-12
    assert abs(scenario_tree_value(central) - 1.15) <= 1e-12
    vd = decentralized_bruteforce(enumeration_instance(InformationStructure.DECENTRALIZED))
    assert abs(vd - 1.55) <= 1e-12
    grids = [admissible_resource_grid(central, t) for t in range(central.horizon)]
    best = min(upper_bound(central, CoordinationProcess(CoordinationKind.RESOURCE, [a, b], (1, 1))).value
               for a in grids[0] for b in grids[1])
    assert abs(best - vd) <= 1e-12
    assert vc <= vd


@given(st.integers(0, 10_000))
def test_decentralized_value_brackets(seed):
    rng = np.random.default_rng(seed)
    inst = random_storage_instance(rng, 2, 2, information=InformationStructure.DECENTRALIZED)
    vd = decentralized_bruteforce(inst)
    vc = global_dp(inst.replace(information=InformationStructure.CENTRALIZED)).value
    assert vc <= vd + 1e-12
    grids = [admissible_resource_grid(inst, t) for t in range(2)]
    best = min(upper_bound(inst, CoordinationProcess(CoordinationKind.RESOURCE, [a, b], (1, 1))).value
               for a in grids[0] for b in grids[1])
    assert vd <= best + 1e-12


def test_decentralized_bruteforce_needs_closed_dynamics():
    unit = toy_unit(dyn=lambda t, x, u, w: np.clip(np.asarray(x, float) + 0.5 * np.asarray(u, float), 0, 1))
    inst = toy_instance([unit], horizon=2)
    with pytest.raises(ModelError):
        decentralized_bruteforce(inst)


def test_oracle_report_round_trip():
    for v in (1.25, np.inf):
        rep = OracleReport(v)
        assert OracleReport.from_dict(rep.to_dict()).value == v
