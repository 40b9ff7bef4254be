"""Brute-force reference solvers for tiny instances.

``global_dp`` solves the centralized problem on the product of the unit
lattices; ``scenario_tree_value`` re-derives the same number by plain
recursion over joint states, controls and noises; ``static_bounds``
handles one-shot finite problems; ``decentralized_bruteforce`` searches
policies that only see each unit's own noise history.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grids import enumerate_admissible
from .model import (
    MEMBERSHIP_TOL,
    InadmissibleError,
    InformationStructure,
    ModelError,
    ProblemInstance,
    as_rows,
)
from .policy import BudgetExceeded
from .tabulate import theta_labels


@dataclass(frozen=True)
class OracleBudget:
    max_states: int = 200_000
    max_joint_controls: int = 1_000_000
    max_noise: int = 100_000
    max_policies: int = 1_000_000

    def __post_init__(self):
        for name in ("max_states", "max_joint_controls", "max_noise", "max_policies"):
            if getattr(self, name) <= 0:
                raise ModelError(f"budget {name} must be positive")


@dataclass
class GlobalValue:
    """Centralized value on the product lattice, one axis per unit."""

    values: list
    value: float


def _size_report(instance: ProblemInstance, budget: OracleBudget):
    T = instance.horizon
    states = max(math.prod(u.states_at(t).size for u in instance.units) for t in range(T + 1))
    controls = max(math.prod(u.controls_at(t).size for u in instance.units) for t in range(T))
    noise = max(math.prod(instance.noise.unit(i)[t].size for i in range(instance.n_units))
                for t in range(T))
    problems = []
    if states > budget.max_states:
        problems.append(f"{states} product states > {budget.max_states}")
    if controls > budget.max_joint_controls:
        problems.append(f"{controls} joint control points > {budget.max_joint_controls}")
    if noise > budget.max_noise:
        problems.append(f"joint noise support {noise} > {budget.max_noise}")
    return states, controls, noise, problems


def global_dp(instance: ProblemInstance, budget: OracleBudget | None = None) -> GlobalValue:
    """Exact centralized DP on the product lattice.

    For each admissible joint coupling value the units' controls are
    restricted to those producing it; the stage problem is then a min over
    the product of those restricted sets.  Expectations use the per-unit
    tabulated kernels, which are independent across units.
    """
    budget = budget or OracleBudget()
    if instance.information is not InformationStructure.CENTRALIZED:
        raise ModelError("global_dp solves the centralized problem; use "
                         "decentralized_bruteforce for the decentralized one")
    states, controls, noise, problems = _size_report(instance, budget)
    if problems:
        raise BudgetExceeded("oracle budget exceeded: " + "; ".join(problems))
    tabs = instance.tabulation
    N, T = instance.n_units, instance.horizon
    v = None
    for tab in tabs:
        v = np.asarray(tab.final, float) if v is None else np.add.outer(v, tab.final)
    values = [None] * (T + 1)
    values[T] = v
    for t in reversed(range(T)):
        stages = [tab.stages[t] for tab in tabs]
        labelled = [theta_labels(st.theta) for st in stages]
        combos = enumerate_admissible([u for u, _ in labelled], instance.coupling.matrix(t),
                                      limit=budget.max_joint_controls)
        dense = [st.trans.toarray().reshape(st.n_states, st.n_controls, -1) for st in stages]
        supp = [st.support.toarray().reshape(st.n_states, st.n_controls, -1) for st in stages]
        nxt = values[t + 1]
        inf = np.isinf(nxt)
        fin = np.where(inf, 0.0, nxt)
        hit = inf.astype(float)
        shape = tuple(st.n_states for st in stages)
        best = np.full(shape, np.inf)
        for combo in combos:
            cols, masks = [], []
            for i, k in enumerate(combo):
                lab = labelled[i][1]
                c = np.flatnonzero(np.any(lab == k, axis=0))
                cols.append(c)
                masks.append(lab[:, c] != k)
            e, h = fin, hit
            for i in range(N):
                e = np.tensordot(e, dense[i][:, cols[i], :], axes=([0], [2]))
                h = np.tensordot(h, supp[i][:, cols[i], :], axes=([0], [2]))
            # axes are now (x_1, u_1, x_2, u_2, ...); reorder to states then controls
            order = [2 * i for i in range(N)] + [2 * i + 1 for i in range(N)]
            e = np.transpose(e, order)
            h = np.transpose(h, order)
            q = None
            for i in range(N):
                cost = np.where(masks[i], np.inf, stages[i].exp_cost[:, cols[i]])
                idx = [None] * (2 * N)
                idx[i] = slice(None)
                idx[N + i] = slice(None)
                part = cost[tuple(idx)]
                q = part if q is None else q + part
            q = q + e
            q = np.where(h > 0, np.inf, q)
            best = np.minimum(best, np.min(q.reshape(shape + (-1,)), axis=-1))
        values[t] = best
    x0 = tuple(instance.x0_index(i) for i in range(N))
    return GlobalValue(values, float(values[0][x0]))


def scenario_tree_value(instance: ProblemInstance, budget: OracleBudget | None = None) -> float:
    """Centralized value at ``x0`` by direct recursion over joint states, controls and noises.

    Shares no code with :func:`global_dp` beyond the evaluators and the
    interpolation weights; meant for horizons of two or three stages.
    """
    budget = budget or OracleBudget()
    states, controls, noise, problems = _size_report(instance, budget)
    if problems:
        raise BudgetExceeded("oracle budget exceeded: " + "; ".join(problems))
    units = instance.units
    N, T = instance.n_units, instance.horizon
    coupling = instance.coupling

    @lru_cache(maxsize=None)
    def value(t, ks):
        xs = [units[i].states_at(t).points[k] for i, k in enumerate(ks)]
        if t == T:
            return sum(float(units[i].final_cost(x)) for i, x in enumerate(xs))
        best = math.inf
        for us in itertools.product(*(range(u.controls_at(t).size) for u in units)):
            uv = [units[i].controls_at(t).points[j] for i, j in enumerate(us)]
            th = np.concatenate([np.asarray(units[i].coupling(t, xs[i], uv[i]), float)
                                 .reshape(-1)[:units[i].coupling_dim] for i in range(N)])
            if coupling.residual(t, th) > MEMBERSHIP_TOL:
                continue
            total = 0.0
            laws = [instance.noise.unit(i)[t] for i in range(N)]
            for ws in itertools.product(*(range(d.size) for d in laws)):
                p = math.prod(laws[i].probs[k] for i, k in enumerate(ws))
                if p == 0:
                    continue
                cost = 0.0
                corners = []
                for i in range(N):
                    w = laws[i].values[ws[i]]
                    cost += float(units[i].cost(t, xs[i], uv[i], w))
                    if math.isinf(cost):
                        break
                    g = np.asarray(units[i].dynamics(t, xs[i], uv[i], w), float)
                    idx, wt = units[i].states_at(t + 1).interp_weights(g[None, :])
                    corners.append([(int(a), float(b)) for a, b in zip(idx[0], wt[0]) if b > 0])
                if math.isinf(cost):
                    total = math.inf
                    break
                ev = 0.0
                for combo in itertools.product(*corners):
                    wgt = math.prod(c[1] for c in combo)
                    ev += wgt * value(t + 1, tuple(c[0] for c in combo))
                total += p * (cost + ev)
                if math.isinf(total):
                    break
            best = min(best, total)
        return best

    return value(0, tuple(instance.x0_index(i) for i in range(N)))


# -- static one-shot problems ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class GenericProblem:
    """``min sum_i J^i(z^i)`` over finite sets with ``(theta^i(z^i))_i`` in ``ker A``.

    ``costs[i]`` lists ``J^i`` over the ``K_i`` elements of ``Z^i`` and
    ``thetas[i]`` is the matching ``(K_i, m_i)`` array of coupling outputs.
    """

    costs: tuple
    thetas: tuple
    a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "costs", tuple(np.asarray(c, float).reshape(-1) for c in self.costs))
        object.__setattr__(self, "thetas", tuple(np.asarray(th, float).reshape(len(c), -1)
                                                 for c, th in zip(self.costs, self.thetas)))
        width = sum(th.shape[1] for th in self.thetas)
        object.__setattr__(self, "a", as_rows(self.a, width))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([th.shape[1] for th in self.thetas])]).astype(int)


@dataclass
class StaticBounds:
    lower: float
    upper: float
    exact: float


class SandwichViolation(AssertionError):
    pass


def static_bounds(problem: GenericProblem, p, r, budget: OracleBudget | None = None,
                  tol: float = 1e-9) -> StaticBounds:
    """Decomposed price and resource values against the exact optimum, by enumeration."""
    budget = budget or OracleBudget()
    p = np.asarray(p, float).reshape(-1)
    r = np.asarray(r, float).reshape(-1)
    a = problem.a
    if a.shape[0]:
        lam, *_ = np.linalg.lstsq(a.T, p, rcond=None)
        if np.max(np.abs(a.T @ lam - p), initial=0.0) > MEMBERSHIP_TOL:
            raise InadmissibleError("price is not in the row space of A")
        if np.max(np.abs(a @ r), initial=0.0) > MEMBERSHIP_TOL:
            raise InadmissibleError("resource violates A r = 0")
    size = math.prod(len(c) for c in problem.costs)
    if size > budget.max_policies:
        raise BudgetExceeded(f"{size} joint points > {budget.max_policies}")
    off = problem.offsets
    lower = 0.0
    upper = 0.0
    for i, (c, th) in enumerate(zip(problem.costs, problem.thetas)):
        pi, ri = p[off[i]:off[i + 1]], r[off[i]:off[i + 1]]
        lower += float(np.min(c + th @ pi))
        match = np.max(np.abs(th - ri), axis=1, initial=0.0) <= MEMBERSHIP_TOL
        upper += float(np.min(c[match])) if match.any() else math.inf
    exact = math.inf
    for zs in itertools.product(*(range(len(c)) for c in problem.costs)):
        y = np.concatenate([problem.thetas[i][k] for i, k in enumerate(zs)])
        if a.shape[0] and np.max(np.abs(a @ y)) > MEMBERSHIP_TOL:
            continue
        exact = min(exact, sum(float(problem.costs[i][k]) for i, k in enumerate(zs)))
    if not (lower <= exact + tol and exact <= upper + tol):
        raise SandwichViolation(f"lower {lower} <= exact {exact} <= upper {upper} fails")
    return StaticBounds(lower, upper, exact)


def random_generic_problem(rng: np.random.Generator, n_units: int = 2, size: int = 4,
                           m: int = 1, values: int = 3):
    """Random tiny problem with a random full-row-rank coupling and one admissible (p, r).

    ``r`` is the coupling output of a random admissible joint point when
    one exists (else a random kernel vector); ``p = A^T lambda`` for random
    ``lambda``.
    """
    costs = [np.round(rng.normal(size=size), 3) for _ in range(n_units)]
    thetas = [rng.integers(-(values // 2), values // 2 + 1, (size, m)).astype(float)
              for _ in range(n_units)]
    width = n_units * m
    rows = int(rng.integers(1, width)) if width > 1 else 1
    while True:
        a = rng.integers(-1, 2, (rows, width)).astype(float)
        if np.linalg.matrix_rank(a) == rows:
            break
    prob = GenericProblem(costs, thetas, a)
    feasible = []
    for zs in itertools.product(*(range(size) for _ in range(n_units))):
        y = np.concatenate([thetas[i][k] for i, k in enumerate(zs)])
        if np.max(np.abs(a @ y)) <= MEMBERSHIP_TOL:
            feasible.append(y)
    if feasible:
        r = feasible[int(rng.integers(len(feasible)))]
    else:
        basis = np.linalg.svd(a)[2][rows:]
        r = basis.T @ rng.normal(size=basis.shape[0])
    p = a.T @ rng.normal(size=rows)
    return prob, p, r


# -- decentralized information ---------------------------------------------------

def _local_histories(laws, T):
    """Positive-probability noise index histories ``h`` of length ``t`` for t = 0..T."""
    out = [[()]]
    for t in range(T):
        pos = [k for k in range(laws[t].size) if laws[t].probs[k] > 0]
        out.append([h + (k,) for h in out[-1] for k in pos])
    return out


def _unit_policies(instance, i, hists, budget):
    """Per local policy: ``(signature, expected cost)`` with min cost per signature."""
    unit = instance.units[i]
    laws = instance.noise.unit(i)
    T = instance.horizon
    slots = [(t, h) for t in range(T) for h in hists[t]]
    n_ctrl = [unit.controls_at(t).size for t, _ in slots]
    total = math.prod(n_ctrl)
    if total > budget.max_policies:
        raise BudgetExceeded(f"unit {i}: {total} local policies > {budget.max_policies}")
    x0 = np.asarray(instance.x0[i], float)
    pos = {slot: k for k, slot in enumerate(slots)}
    best: dict = {}
    for choice in itertools.product(*(range(n) for n in n_ctrl)):
        pol = {slot: j for slot, j in zip(slots, choice)}
        sig = [None] * len(slots)
        feasible = True
        cost = 0.0
        states = {(): x0}
        for t in range(T):
            nxt = {}
            for h in hists[t]:
                x = states[h]
                u = unit.controls_at(t).points[pol[(t, h)]]
                th = np.asarray(unit.coupling(t, x, u), float).reshape(-1)[:unit.coupling_dim]
                sig[pos[(t, h)]] = tuple(np.round(th, 9) + 0.0)
                ph = math.prod(laws[s].probs[k] for s, k in enumerate(h))
                for k in range(laws[t].size):
                    if laws[t].probs[k] <= 0:
                        continue
                    w = laws[t].values[k]
                    c = float(unit.cost(t, x, u, w))
                    if math.isinf(c):
                        feasible = False
                        break
                    cost += ph * laws[t].probs[k] * c
                    xn = np.asarray(unit.dynamics(t, x, u, w), float).reshape(-1)
                    if unit.states_at(t + 1).index_of(xn) is None:
                        raise ModelError("decentralized brute force needs dynamics that map "
                                         "lattice points to lattice points")
                    nxt[h + (k,)] = xn
                if not feasible:
                    break
            if not feasible:
                break
            states = nxt
        if not feasible:
            continue
        for h in hists[T]:
            ph = math.prod(laws[s].probs[k] for s, k in enumerate(h))
            cost += ph * float(unit.final_cost(states[h]))
        key = tuple(sig)
        if key not in best or cost < best[key]:
            best[key] = cost
    return slots, best


def decentralized_bruteforce(instance: ProblemInstance, budget: OracleBudget | None = None) -> float:
    """Optimal value when unit ``i`` only observes its own noise history.

    Local policies are maps from local noise histories to lattice controls.
    Expected cost is separable, so each unit keeps its cheapest policy per
    coupling signature (the coupling output after every local history);
    combinations of signatures are then checked against the coupling for
    every joint history.  Returns +inf when no combination is admissible.
    """
    budget = budget or OracleBudget()
    T, N = instance.horizon, instance.n_units
    per_unit = []
    for i in range(N):
        hists = _local_histories(instance.noise.unit(i), T)
        slots, best = _unit_policies(instance, i, hists, budget)
        per_unit.append((slots, hists, best))
    n_comb = math.prod(len(b) for _, _, b in per_unit)
    if n_comb > budget.max_policies:
        raise BudgetExceeded(f"{n_comb} signature combinations > {budget.max_policies}")
    value = math.inf
    for choice in itertools.product(*(sorted(b.items()) for _, _, b in per_unit)):
        total = sum(c for _, c in choice)
        if total >= value:
            continue
        ok = True
        for t in range(T):
            a = instance.coupling.matrix(t)
            if a.shape[0] == 0:
                continue
            per = []
            for i, (slots, hists, _) in enumerate(per_unit):
                sig = choice[i][0]
                per.append({sig[slots.index((t, h))] for h in hists[t]})
            for ys in itertools.product(*per):
                if np.max(np.abs(a @ np.concatenate([np.array(y) for y in ys]))) > MEMBERSHIP_TOL:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            value = total
    return value


@dataclass
class OracleReport:
    """Centralized optimum at ``x0`` as shown in report tables."""

    value: float
    method: str = "global_dp"

    def to_dict(self) -> dict:
        v = self.value
        return {"kind": "oracle", "method": self.method,
                "value": v if math.isfinite(v) else ("inf" if v > 0 else "-inf")}

    @classmethod
    def from_dict(cls, d) -> "OracleReport":
        return cls(float(d["value"]), d.get("method", "global_dp"))
