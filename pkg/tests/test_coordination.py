import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochdecomp.coordination import (
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
from stochdecomp.localdp import solve_price_dp, solve_unconstrained_dp
from stochdecomp.microgrid import random_storage_instance
from stochdecomp.model import (
    CoordinationKind,
    CoordinationProcess,
    CouplingSubspace,
    InadmissibleError,
    project_price,
)
from stochdecomp.oracle import global_dp

from conftest import toy_instance, toy_unit

PRICE, RESOURCE = CoordinationKind.PRICE, CoordinationKind.RESOURCE


def _price(inst, stages):
    return project_price(stages, inst.coupling)


def _random_price(inst, rng, scale=1.0):
    return _price(inst, [rng.normal(size=inst.coupling.width) * scale
                         for _ in range(inst.horizon)])


def _random_resource(inst, rng):
    vals = []
    for t in range(inst.horizon):
        grid = admissible_resource_grid(inst, t)
        vals.append(grid[rng.integers(len(grid))])
    return CoordinationProcess(RESOURCE, vals, inst.coupling.dims)


def _zero_price(inst):
    return CoordinationProcess.zeros(PRICE, inst.horizon, inst.coupling.dims)


# -- bounds -----------------------------------------------------------------------

def test_zero_price_bound_is_sum_of_unconstrained_optima(micro2):
    rep = lower_bound(micro2, _zero_price(micro2))
    parts = [solve_unconstrained_dp(tab)[0].values[0][micro2.x0_index(i)]
             for i, tab in enumerate(micro2.tabulation)]
    assert rep.per_unit == tuple(parts)
    assert rep.value == parts[0] + parts[1]
    assert rep.value <= global_dp(micro2).value
    assert "global feasibility unknown" in rep.flags


def test_lower_bound_rejects_inadmissible_price(micro2):
    bad = CoordinationProcess(PRICE, [[1.0, 0.0]] * micro2.horizon, micro2.coupling.dims)
    with pytest.raises(InadmissibleError):
        lower_bound(micro2, bad)


def test_upper_bound_rejects_inadmissible_resource(micro2):
    bad = CoordinationProcess(RESOURCE, [[1.0, 0.0]] * micro2.horizon, micro2.coupling.dims)
    with pytest.raises(InadmissibleError):
        upper_bound(micro2, bad)


def test_unattainable_resource_gives_inf(micro2):
    r = CoordinationProcess(RESOURCE, [[5.0, -5.0]] * micro2.horizon, micro2.coupling.dims)
    assert upper_bound(micro2, r).value == np.inf


def test_lower_bound_finite_on_globally_infeasible_instance():
    # both outputs are positive, so they can never sum to zero
    th = lambda t, x, u: np.asarray(u, float) + 2.0
    units = [toy_unit("a", theta=th), toy_unit("b", theta=th)]
    inst = toy_instance(units, coupling=CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1)))
    rep = lower_bound(inst, _zero_price(inst))
    assert np.isfinite(rep.value)
    assert "global feasibility unknown" in rep.flags
    assert global_dp(inst).value == np.inf


def test_identity_row_coupling_makes_resource_bound_exact():
    inst = toy_instance([toy_unit(cost=lambda t, x, u, w: (np.asarray(u, float)[..., 0] - 0.5) ** 2
                                  + 0 * np.asarray(w)[..., 0])],
                        coupling=CouplingSubspace(np.array([[1.0]]), (1,)))
    r = CoordinationProcess(RESOURCE, [[0.0]], (1,))
    assert upper_bound(inst, r).value == global_dp(inst).value == 0.25


@given(st.integers(0, 10_000))
def test_sandwich_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    inst = random_storage_instance(rng, int(rng.integers(2, 4)), 2, fractional=seed % 3 == 0)
    v = global_dp(inst).value
    lb = lower_bound(inst, _random_price(inst, rng, 2.0)).value
    ub = upper_bound(inst, _random_resource(inst, rng)).value
    assert lb <= v + 1e-9
    assert v <= ub + 1e-9


def test_sandwich_on_micro2(micro2):
    rng = np.random.default_rng(5)
    v = global_dp(micro2).value
    for _ in range(10):
        assert lower_bound(micro2, _random_price(micro2, rng)).value <= v + 1e-9
        assert v <= upper_bound(micro2, _random_resource(micro2, rng)).value + 1e-9


# -- gradients ----------------------------------------------------------------------

def test_gradient_single_unit_deterministic():
    inst = toy_instance([toy_unit()])
    p = CoordinationProcess(PRICE, [[0.0]], (1,))
    # uncoupled: the price space is {0}, but the supergradient is still E[Theta]
    rep = lower_bound(inst, p)
    g = price_gradient(inst, p, rep)
    np.testing.assert_array_equal(g[0], [0.0])
    inst2 = toy_instance([toy_unit(), toy_unit("b")],
                         coupling=CouplingSubspace(np.array([[1.0, 0.0]]), (1, 1)))
    p2 = CoordinationProcess(PRICE, [[1.0, 0.0]], (1, 1))
    g2 = price_gradient(inst2, p2, lower_bound(inst2, p2))
    np.testing.assert_array_equal(g2[0], [-1.0, 0.0])


def _unchecked_lb(inst, stages):
    out = 0.0
    for i, tab in enumerate(inst.tabulation):
        lo, hi = inst.coupling.offsets[i], inst.coupling.offsets[i + 1]
        v, _ = solve_price_dp(tab, [s[lo:hi] for s in stages])
        out += v.values[0][inst.x0_index(i)]
    return out


def test_gradient_matches_central_differences(micro2):
    rng = np.random.default_rng(11)
    p = _random_price(micro2, rng, 0.3)
    g = price_gradient(micro2, p, lower_bound(micro2, p))
    eps = 1e-5
    base = [v.copy() for v in p.values]
    for t in range(micro2.horizon):
        for c in range(micro2.coupling.width):
            up = [v.copy() for v in base]
            dn = [v.copy() for v in base]
            up[t][c] += eps
            dn[t][c] -= eps
            fd = (_unchecked_lb(micro2, up) - _unchecked_lb(micro2, dn)) / (2 * eps)
            assert abs(fd - g[t][c]) <= max(1e-4, 0.05 * abs(g[t][c]))


def test_gradient_is_symmetric_for_identical_units():
    units = [toy_unit("a"), toy_unit("b")]
    inst = toy_instance(units, coupling=CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1)))
    p = CoordinationProcess(PRICE, [[0.7, 0.7]], (1, 1))
    g = price_gradient(inst, p, lower_bound(inst, p))
    assert g[0][0] == g[0][1]


@given(st.integers(0, 10_000))
def test_supergradient_inequality(seed):
    rng = np.random.default_rng(seed)
    inst = random_storage_instance(rng, 2, 3)
    p = _random_price(inst, rng)
    q = _random_price(inst, rng)
    rep = lower_bound(inst, p)
    g = price_gradient(inst, p, rep)
    lin = sum(float(a @ (b - c)) for a, b, c in zip(g, q.values, p.values))
    assert lower_bound(inst, q).value <= rep.value + lin + 1e-9


def _quadratic_instance(centres, coupling):
    units = []
    for k, c in enumerate(centres):
        cost = (lambda c: lambda t, x, u, w: (np.asarray(u, float)[..., 0] - c) ** 2
                + 0 * np.asarray(w)[..., 0])(c)
        units.append(toy_unit(f"q{k}", controls=(-3.0, 3.0, 7), cost=cost))
    return toy_instance(units, coupling=coupling)


def test_resource_gradient_exact_on_quadratic():
    inst = _quadratic_instance([0.4], CouplingSubspace.uncoupled((1,)))
    for r in (-2.0, 0.0, 1.0):
        res = CoordinationProcess(RESOURCE, [[r]], (1,))
        gr = resource_gradient(inst, res)
        assert gr.available and not gr.one_sided
        assert abs(gr.vector[0][0] - 2 * (r - 0.4)) <= 1e-9


def test_resource_gradient_two_units_in_kernel():
    cs = CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1))
    inst = _quadratic_instance([0.4, -1.2], cs)
    res = CoordinationProcess(RESOURCE, [[1.0, -1.0]], (1, 1))
    g = resource_gradient(inst, res).vector[0]
    assert abs(g.sum()) <= 1e-12
    # V(s) = (s - 0.4)^2 + (-s + 1.2)^2 along (1, -1): derivative 2(s-0.4) - 2(-s+1.2) at s=1
    d = 2 * (1 - 0.4) - 2 * (-1 + 1.2)
    np.testing.assert_allclose(g, [d / 2, -d / 2], atol=1e-9)


def test_resource_gradient_permutes_with_identical_units():
    cs = CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1))
    inst = _quadratic_instance([0.3, 0.3], cs)
    g = resource_gradient(inst, CoordinationProcess(RESOURCE, [[1.0, -1.0]], (1, 1))).vector[0]
    gs = resource_gradient(inst, CoordinationProcess(RESOURCE, [[-1.0, 1.0]], (1, 1))).vector[0]
    np.testing.assert_allclose(g, gs[::-1], atol=1e-12)
    np.testing.assert_allclose(g, [2.0, -2.0], atol=1e-9)


def test_resource_gradient_one_sided_at_grid_edge():
    inst = _quadratic_instance([0.4], CouplingSubspace.uncoupled((1,)))
    gr = resource_gradient(inst, CoordinationProcess(RESOURCE, [[3.0]], (1,)))
    assert gr.one_sided == [(0, 0)]
    assert abs(gr.vector[0][0] - ((3 - 0.4) ** 2 - (2 - 0.4) ** 2)) <= 1e-9


# -- outer loops -------------------------------------------------------------------

def test_ascent_without_coupling_effect_stops_immediately():
    zero = lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))
    inst = toy_instance([toy_unit(theta=zero), toy_unit("b", theta=zero)],
                        coupling=CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1)))
    rep = maximize_lower_bound(inst)
    assert rep.status == "small gradient"
    assert len(rep.trace) == 1


def test_ascent_improves_and_stays_below_oracle(micro2):
    lb0 = lower_bound(micro2, _zero_price(micro2)).value
    rep = maximize_lower_bound(micro2)
    assert rep.value >= lb0
    assert rep.value <= global_dp(micro2).value + 1e-9
    best = [row.bound for row in rep.trace]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert len(rep.trace) <= 50


def test_descent_improves_and_stays_above_oracle(micro2):
    r0 = suggest_resource(micro2)
    ub0 = upper_bound(micro2, r0).value
    rep = minimize_upper_bound(micro2, r0)
    assert rep.value <= ub0
    assert rep.value >= global_dp(micro2).value - 1e-9
    best = [row.bound for row in rep.trace]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert len(rep.trace) <= 50


def test_descent_with_single_feasible_point_keeps_start():
    zero = lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))
    inst = toy_instance([toy_unit(theta=zero), toy_unit("b", theta=zero)],
                        coupling=CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1)))
    r0 = CoordinationProcess(RESOURCE, [[0.0, 0.0]], (1, 1))
    rep = minimize_upper_bound(inst, r0)
    assert rep.process.same_as(r0)


def test_descent_rejects_infeasible_start(micro2):
    r = CoordinationProcess(RESOURCE, [[5.0, -5.0]] * micro2.horizon, micro2.coupling.dims)
    with pytest.raises(InfeasibleError, match="suggest_resource"):
        minimize_upper_bound(micro2, r)


def test_pluggable_direction_is_used(micro2):
    calls = []

    def direction(grad, history):
        calls.append(len(history))
        return grad

    rep = maximize_lower_bound(micro2, options=OuterOptions(max_iters=4, direction=direction))
    assert calls[:2] == [0, 1]
    assert rep.value >= lower_bound(micro2, _zero_price(micro2)).value


def test_suggest_resource_examples(micro2):
    zero = lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))
    inst = toy_instance([toy_unit(theta=zero)], coupling=CouplingSubspace(np.array([[1.0]]), (1,)))
    np.testing.assert_array_equal(suggest_resource(inst).values[0], [0.0])
    r = suggest_resource(micro2)
    assert np.isfinite(upper_bound(micro2, r).value)
    th = lambda t, x, u: np.asarray(u, float) + 2.0
    bad = toy_instance([toy_unit("a", theta=th), toy_unit("b", theta=th)],
                       coupling=CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], (1, 1)))
    with pytest.raises(InfeasibleError):
        suggest_resource(bad)


def test_bound_report_round_trip(micro2):
    rep = maximize_lower_bound(micro2, options=OuterOptions(max_iters=3))
    back = BoundReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    assert back.value == rep.value


def test_bounds_are_deterministic(micro3):
    a = maximize_lower_bound(micro3, options=OuterOptions(max_iters=5))
    b = maximize_lower_bound(micro3, options=OuterOptions(max_iters=5), workers=3)
    assert a.to_dict() == b.to_dict()
