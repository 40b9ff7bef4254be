import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochdecomp.localdp import (
    INFEASIBLE,
    interp,
    load_tables,
    save_tables,
    solve_batch,
    solve_price_dp,
    solve_resource_dp,
    solve_unconstrained_dp,
    table_digest,
)
from stochdecomp.microgrid import random_storage_instance, shipped_instance, storage_unit
from stochdecomp.model import DiscreteDistribution, Lattice, ModelError

from conftest import toy_unit

POINT = [DiscreteDistribution.point(0.0)]


def test_zero_price_equals_unconstrained_bit_exact(micro2):
    for tab in micro2.tabulation:
        zeros = [np.zeros(tab.stages[t].theta.shape[2]) for t in range(tab.horizon)]
        vp, fp = solve_price_dp(tab, zeros)
        vu, fu = solve_unconstrained_dp(tab)
        for a, b in zip(vp.values, vu.values):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(fp.indices, fu.indices):
            np.testing.assert_array_equal(a, b)


def test_price_dp_three_controls():
    # min(1 - 1, 0, 1 + 1) is reached at u = -1
    v, fb = solve_price_dp(toy_unit(), [[1.0]], POINT, 1)
    assert v.values[0][0] == 0.0
    np.testing.assert_array_equal(fb.control(0, 0), [-1.0])


def test_all_controls_forbidden_gives_inf_and_marker():
    def cost(t, x, u, w):
        x = np.asarray(x, float)[..., 0]
        return np.where(x > 0.5, np.inf, np.asarray(u, float)[..., 0] ** 2) + 0 * np.asarray(w)[..., 0]

    v, fb = solve_price_dp(toy_unit(cost=cost), [[0.0]], POINT, 1)
    assert v.values[0][1] == np.inf
    assert fb.indices[0][1] == INFEASIBLE
    assert fb.control(0, 1) is None
    assert np.isfinite(v.values[0][0])


def test_resource_dp_examples():
    v, _ = solve_resource_dp(toy_unit(), [[5.0]], POINT, 1)
    assert v.values[0][0] == np.inf
    v, fb = solve_resource_dp(toy_unit(), [[1.0]], POINT, 1)
    assert v.values[0][0] == 1.0
    np.testing.assert_array_equal(fb.control(0, 0), [1.0])


def test_resource_of_unconstrained_argmin_recovers_unconstrained_value():
    inst = shipped_instance("micro-2", deterministic_noise=True)
    for i, tab in enumerate(inst.tabulation):
        vu, fu = solve_unconstrained_dp(tab)
        k = inst.x0_index(i)
        r = []
        for t, st_ in enumerate(tab.stages):
            j = fu.indices[t][k]
            r.append(st_.theta[k, j])
            k = int(st_.trans[k * st_.n_controls + j].indices[0])
        vr, _ = solve_resource_dp(tab, r)
        assert vr.values[0][inst.x0_index(i)] == vu.values[0][inst.x0_index(i)]


def test_interp_examples():
    lat = Lattice(0.0, 1.0, 2)
    vals = np.array([0.0, 2.0])
    assert interp(lat, vals, [0.25]) == 0.5
    fine = Lattice(0.0, 1.0, 11)
    y = np.random.default_rng(0).normal(size=11)
    for k, x in enumerate(fine.points):
        assert interp(fine, y, x) == y[k]
    assert interp(lat, np.array([0.0, np.inf]), [0.5]) == np.inf
    assert interp(lat, np.array([0.0, np.inf]), [0.0]) == 0.0
    with pytest.raises(ModelError):
        interp(lat, vals, [1.5])


def test_stage_T_slices_equal_final_cost(micro3):
    for tab in micro3.tabulation:
        m = tab.stages[0].theta.shape[2]
        vp, _ = solve_price_dp(tab, [np.ones(m)] * tab.horizon)
        vr, _ = solve_resource_dp(tab, [np.zeros(m)] * tab.horizon)
        assert vp.values[-1].tobytes() == tab.final.tobytes()
        assert vr.values[-1].tobytes() == tab.final.tobytes()


def test_feedback_is_a_true_argmin(micro2):
    tab = micro2.tabulation[0]
    price = [np.array([0.3])] * tab.horizon
    v, fb = solve_price_dp(tab, price)
    for t, st_ in enumerate(tab.stages):
        q = st_.exp_cost + st_.theta @ price[t] + st_.expected_next(v.values[t + 1])
        np.testing.assert_array_equal(q.min(axis=1), v.values[t])
        np.testing.assert_array_equal(q[np.arange(len(q)), fb.indices[t]], v.values[t])


def _unit_values(tab, k0, seed):
    rng = np.random.default_rng(seed)
    T = tab.horizon
    p = [rng.normal(size=1) for _ in range(T)]
    grid = tab.theta_grids
    r = [grid[t][rng.integers(len(grid[t]))] for t in range(T)]
    lo = solve_price_dp(tab, p)[0].values[0][k0]
    hi = solve_resource_dp(tab, r)[0].values[0][k0]
    return lo, hi, sum(float(a @ b) for a, b in zip(p, r))


@given(st.integers(0, 10_000))
def test_weak_duality_of_penalized_form(seed):
    inst = random_storage_instance(np.random.default_rng(seed), 1, 3, fractional=seed % 2 == 1)
    lo, hi, pr = _unit_values(inst.tabulation[0], inst.x0_index(0), seed)
    assert lo <= hi + pr + 1e-9


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_price_value_is_concave(seed, lam):
    inst = random_storage_instance(np.random.default_rng(seed), 1, 3)
    tab, k0 = inst.tabulation[0], inst.x0_index(0)
    rng = np.random.default_rng(seed + 1)
    p = [rng.normal(size=1) * 3 for _ in range(3)]
    q = [rng.normal(size=1) * 3 for _ in range(3)]
    mid = [lam * a + (1 - lam) * b for a, b in zip(p, q)]
    f = lambda price: solve_price_dp(tab, price)[0].values[0][k0]
    assert f(mid) >= lam * f(p) + (1 - lam) * f(q) - 1e-9


@given(st.integers(0, 10_000))
def test_finer_controls_never_raise_resource_value(seed):
    rng = np.random.default_rng(seed)
    T = 3
    params = {"capacity": 4.0, "quad": rng.uniform(0.1, 2, T).tolist(),
              "lin": rng.uniform(-1, 1, T).tolist(), "waste": 0.2}
    coarse = storage_unit("c", {**params, "u_lower": -2.0, "u_upper": 2.0, "u_count": 3})
    fine = storage_unit("f", {**params, "u_lower": -2.0, "u_upper": 2.0, "u_count": 5})
    laws = [DiscreteDistribution([0.0, 2.0], [0.5, 0.5])] * T
    r = [[float(v)] for v in rng.choice([-2.0, 0.0, 2.0], T)]
    vc, _ = solve_resource_dp(coarse, r, laws, T)
    vf, _ = solve_resource_dp(fine, r, laws, T)
    assert np.all(vf.values[0] <= vc.values[0])


def test_runs_are_bit_identical(micro3):
    tab = micro3.tabulation[0]
    price = [np.array([0.1, -0.2])] * tab.horizon
    a = solve_price_dp(tab, price)[0]
    b = solve_price_dp(tab, price)[0]
    assert table_digest(a) == table_digest(b)


def test_batch_keeps_order_across_workers(micro3):
    jobs = [(solve_unconstrained_dp, (tab,), {}) for tab in micro3.tabulation]
    one = [table_digest(v) for v, _ in solve_batch(jobs, 1)]
    three = [table_digest(v) for v, _ in solve_batch(jobs, 3)]
    assert one == three


def test_table_round_trip_is_bit_exact(tmp_path, micro2):
    v, fb = solve_price_dp(micro2.tabulation[0], [np.array([0.5])] * micro2.horizon)
    path = tmp_path / "tables.npz"
    save_tables(path, v, fb, instance_hash="abc")
    v2, fb2, h = load_tables(path)
    assert h == "abc"
    assert table_digest(v2) == table_digest(v)
    for a, b in zip(fb.indices, fb2.indices):
        np.testing.assert_array_equal(a, b)
    assert v2.lattices == v.lattices


def test_price_dimension_mismatch_is_rejected(micro2):
    with pytest.raises(ModelError):
        solve_price_dp(micro2.tabulation[0], [np.zeros(2)] * micro2.horizon)
