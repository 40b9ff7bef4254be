"""Admissible policies built from decomposed value tables.

Three policies are available:

* price policy: one-step coupled argmin of ``sum_i E[L^i + Vlow^i_{t+1}]``;
* resource policy: the same with the resource value tables;
* decentralized resource feedback: unit ``i`` alone picks the best control
  whose coupling output equals ``r_t^i``, looking only at its own state.

The coupled one-step problem is solved exactly.  For a fixed joint
coupling value the units decouple, so each unit reduces its controls to
the best one per distinct coupling output and the admissible joint
outputs are searched with :func:`~stochdecomp.grids.min_sum_admissible`.
"""
from __future__ import annotations

import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grids import min_sum_admissible
from .localdp import RESOURCE_TOL, interp
from .model import (
    CoordinationKind,
    CoordinationProcess,
    ModelError,
    ProblemInstance,
    check_resource,
)
from .tabulate import theta_labels

Z95 = 1.96


class PolicyInfeasible(ModelError):
    """No admissible control exists at a visited state."""


class BudgetExceeded(ModelError):
    """A brute-force computation is larger than its configured budget."""


class PolicyKind(enum.Enum):
    PRICE = "price"
    RESOURCE = "resource"
    DECENTRALIZED = "decentralized"


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """A policy bound to value tables (one per unit) of ``instance``."""

    kind: PolicyKind
    instance: ProblemInstance
    tables: tuple
    resource: CoordinationProcess | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "tables", tuple(self.tables))
        if len(self.tables) != self.instance.n_units:
            raise ModelError("one value table per unit is required")
        for tab in self.tables:
            if tab.horizon != self.instance.horizon:
                raise ModelError("value tables must cover every stage 0..T")
        if self.kind is PolicyKind.DECENTRALIZED:
            if self.resource is None or self.resource.kind is not CoordinationKind.RESOURCE:
                raise ModelError("decentralized feedback needs a resource process")
            check_resource(self.resource, self.instance)
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_ev", {})

    @classmethod
    def from_report(cls, report, instance: ProblemInstance, kind=None) -> "PolicySpec":
        """Policy from a :class:`~stochdecomp.coordination.BoundReport` with tables."""
        if not report.tables:
            raise ModelError("bound report carries no value tables")
        if kind is None:
            kind = PolicyKind.PRICE if report.kind == "lower" else PolicyKind.RESOURCE
        kind = PolicyKind(kind)
        resource = report.process if kind is PolicyKind.DECENTRALIZED else None
        if kind is PolicyKind.DECENTRALIZED and report.kind != "upper":
            raise ModelError("decentralized feedback is built from resource tables")
        return cls(kind, instance, report.tables, resource)

    @property
    def name(self) -> str:
        return self.kind.value

    # -- one-unit ingredients -------------------------------------------------

    def _stage_q(self, t: int, i: int) -> np.ndarray:
        """``E[L + V_{t+1}(g)]`` on the lattice, shape ``(nx, nu)``."""
        key = (t, i)
        q = self._ev.get(key)
        if q is None:
            st = self.instance.tabulation[i].stages[t]
            q = st.exp_cost + st.expected_next(self.tables[i].values[t + 1])
            self._ev[key] = q
        return q

    def unit_q(self, t: int, i: int, x) -> tuple[np.ndarray, np.ndarray]:
        """Control values ``q[u]`` and coupling outputs ``theta[u]`` of unit ``i`` at ``x``."""
        tab = self.instance.tabulation[i]
        x = np.asarray(x, float).reshape(-1)
        k = tab.lattices[t].index_of(x)
        if k is not None:
            return self._stage_q(t, i)[k], tab.stages[t].theta[k]
        return self._offgrid_q(t, i, x)

    def _offgrid_q(self, t, i, x):
        unit = self.instance.units[i]
        dist = self.instance.noise.unit(i)[t]
        us = unit.controls_at(t).points
        xs = np.broadcast_to(x, (len(us), len(x)))
        theta = np.asarray(unit.coupling(t, xs, us), float).reshape(len(us), -1)
        if unit.coupling_dim == 0:
            theta = np.zeros((len(us), 0))
        lat = unit.states_at(t + 1)
        vals = self.tables[i].values[t + 1]
        q = np.zeros(len(us))
        for w, p in zip(dist.values, dist.probs):
            if p <= 0:
                continue
            ws = np.broadcast_to(w, (len(us), len(w)))
            c = np.asarray(unit.cost(t, xs, us, ws), float)
            nxt = np.asarray(unit.dynamics(t, xs, us, ws), float)
            for j in range(len(us)):
                if not np.isfinite(q[j]):
                    continue
                if not np.isfinite(c[j]) or not lat.contains(nxt[j]):
                    q[j] = np.inf
                    continue
                q[j] += p * (c[j] + interp(lat, vals, nxt[j]))
        return q, theta

    # -- decisions ------------------------------------------------------------

    def _unit_groups(self, t, i, x):
        key = ("g", t, i, np.asarray(x, float).tobytes())
        hit = self._cache.get(key)
        if hit is None:
            q, theta = self.unit_q(t, i, x)
            if self.kind is PolicyKind.DECENTRALIZED:
                r = self.resource.unit(i)[t]
                if theta.shape[1]:
                    q = np.where(np.max(np.abs(theta - r), axis=1) > RESOURCE_TOL, np.inf, q)
                j = int(np.argmin(q))
                hit = (q[j], j)
            else:
                uniq, labels = theta_labels(theta[None, :, :])
                labels = labels[0]
                best = np.full(len(uniq), np.inf)
                arg = np.full(len(uniq), -1)
                for j in range(len(q)):
                    k = labels[j]
                    if arg[k] < 0 or q[j] < best[k]:
                        best[k], arg[k] = q[j], j
                hit = (uniq, best, arg)
            self._cache[key] = hit
        return hit

    def decide(self, t: int, x) -> tuple | None:
        """Control indices per unit at joint state ``x``, or ``None`` if infeasible."""
        x = [np.asarray(xi, float).reshape(-1) for xi in x]
        if self.kind is PolicyKind.DECENTRALIZED:
            out = []
            for i, xi in enumerate(x):
                val, j = self._unit_groups(t, i, xi)
                if not np.isfinite(val):
                    return None
                out.append(j)
            return tuple(out)
        key = ("d", t, b"".join(xi.tobytes() for xi in x))
        if key in self._cache:
            return self._cache[key]
        groups = [self._unit_groups(t, i, xi) for i, xi in enumerate(x)]
        hit = min_sum_admissible([g[0] for g in groups], [g[1] for g in groups],
                                 self.instance.coupling.matrix(t))
        if hit is None or not np.isfinite(hit[0]):
            out = None
        else:
            out = tuple(int(groups[i][2][k]) for i, k in enumerate(hit[1]))
        self._cache[key] = out
        return out


def policy_step(spec: PolicySpec, t: int, x) -> list[np.ndarray]:
    """Global control ``u_t`` (one vector per unit) at joint state ``x``.

    For the decentralized feedback, unit ``i``'s control depends on
    ``x[i]`` only.
    """
    idx = spec.decide(t, x)
    if idx is None:
        raise PolicyInfeasible(f"{spec.name} policy has no admissible control at t={t}")
    return [spec.instance.units[i].controls_at(t).points[j] for i, j in enumerate(idx)]


# -- exact evaluation -----------------------------------------------------------

@dataclass
class PolicyValue:
    """``V_t^pi`` on the product lattice; ``values[t]`` has one axis per unit."""

    values: list
    x0_value: float


def _product_size(instance, t) -> int:
    return math.prod(u.states_at(t).size for u in instance.units)


def evaluate_policy_exact(spec: PolicySpec, max_states: int = 200_000) -> PolicyValue:
    """Expected cost of the policy from every product-lattice state, by backward recursion."""
    inst = spec.instance
    T = inst.horizon
    for t in range(T + 1):
        size = _product_size(inst, t)
        if size > max_states:
            raise BudgetExceeded(f"product lattice at t={t} has {size} states "
                                 f"(budget {max_states})")
    tabs = inst.tabulation
    v = None
    for i, tab in enumerate(tabs):
        k = np.asarray(tab.final, float)
        v = k if v is None else np.add.outer(v, k)
    values = [None] * (T + 1)
    values[T] = v
    for t in reversed(range(T)):
        shape = tuple(tab.lattices[t].size for tab in tabs)
        joint = np.array(list(np.ndindex(*shape)), dtype=np.int64).reshape(-1, len(shape))
        S = len(joint)
        ctrl = np.zeros_like(joint)
        ok = np.ones(S, dtype=bool)
        for s, ks in enumerate(joint):
            x = [tabs[i].lattices[t].points[k] for i, k in enumerate(ks)]
            d = spec.decide(t, x)
            if d is None:
                ok[s] = False
            else:
                ctrl[s] = d
        el = np.zeros(S)
        for i, tab in enumerate(tabs):
            part = tab.stages[t].exp_cost[joint[:, i], ctrl[:, i]]
            el = part if i == 0 else el + part
        ev = _expect(tabs, t, joint, ctrl, values[t + 1])
        vt = np.where(ok, el + ev, np.inf)
        values[t] = vt.reshape(shape)
    x0 = tuple(inst.x0_index(i) for i in range(inst.n_units))
    return PolicyValue(values, float(values[0][x0]))


def _expect(tabs, t, joint, ctrl, v_next):
    """``E[V_{t+1}]`` under independent per-unit kernels for each (state, control) row."""
    inf = np.isinf(v_next)
    fin = np.where(inf, 0.0, v_next)
    hit = inf.astype(float)
    out_v = out_h = None
    for i, tab in enumerate(tabs):
        st = tab.stages[t]
        rows = joint[:, i] * st.n_controls + ctrl[:, i]
        r = st.trans[rows].toarray()
        s = st.support[rows].toarray()
        if i == 0:
            out_v = np.tensordot(r, fin, axes=([1], [0]))
            out_h = np.tensordot(s, hit, axes=([1], [0]))
        else:
            out_v = np.einsum("sa,sa...->s...", r, out_v)
            out_h = np.einsum("sa,sa...->s...", s, out_h)
    return np.where(out_h > 0, np.inf, out_v)


# -- Monte Carlo ------------------------------------------------------------------

@dataclass
class SimulationReport:
    policy: str
    mean: float
    halfwidth: float
    n: int
    seed: int
    residual: float
    flagged: int = 0
    costs: np.ndarray | None = field(default=None, repr=False)
    trajectories: list | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "mean": _num(self.mean), "halfwidth": _num(self.halfwidth),
                "n": self.n, "seed": self.seed, "residual": self.residual,
                "flagged": self.flagged}

    @classmethod
    def from_dict(cls, d) -> "SimulationReport":
        return cls(d["policy"], float(d["mean"]), float(d["halfwidth"]), int(d["n"]),
                   int(d["seed"]), float(d["residual"]), int(d.get("flagged", 0)))

    def trajectory_csv(self) -> str:
        """Per-scenario rows ``scenario,t,unit,state,control,coupling,stage_cost``."""
        if self.trajectories is None:
            raise ModelError("simulation was run without trajectory recording")
        buf = io.StringIO()
        buf.write("scenario,t,unit,state,control,coupling,stage_cost\n")
        for row in self.trajectories:
            s, t, i, x, u, th, c = row
            buf.write(f"{s},{t},{i},{_vec(x)},{_vec(u)},{_vec(th)},{c!r}\n")
        return buf.getvalue()


def _vec(v) -> str:
    return " ".join(repr(float(a)) for a in np.asarray(v).reshape(-1))


def _num(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def scenario_uniforms(seed: int, scenario: int, horizon: int, n_units: int) -> np.ndarray:
    """Counter-based stream of one scenario: uniforms ``(T, N)``, stage-major."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, scenario])))
    return gen.random((horizon, n_units))


def _run_scenario(spec: PolicySpec, s: int, seed: int, record: bool):
    inst = spec.instance
    T, N = inst.horizon, inst.n_units
    unif = scenario_uniforms(seed, s, T, N)
    x = [np.array(v, float) for v in inst.x0]
    stage = np.zeros(T)
    residual = 0.0
    rows = [] if record else None
    flagged = False
    for t in range(T):
        idx = spec.decide(t, x)
        if idx is None:
            raise PolicyInfeasible(f"scenario {s}: {spec.name} policy has no admissible "
                                   f"control at t={t}")
        total = 0.0
        thetas = []
        nxt = []
        for i, unit in enumerate(inst.units):
            u = unit.controls_at(t).points[idx[i]]
            dist = inst.noise.unit(i)[t]
            cum = np.cumsum(dist.probs)
            k = min(int(np.searchsorted(cum, unif[t, i], side="right")), dist.size - 1)
            w = dist.values[k]
            c = float(unit.cost(t, x[i], u, w))
            th = np.asarray(unit.coupling(t, x[i], u), float).reshape(-1)[:unit.coupling_dim]
            xn = np.asarray(unit.dynamics(t, x[i], u, w), float).reshape(-1)
            if not unit.states_at(t + 1).contains(xn)[()]:
                c = np.inf
                flagged = True
            total = c if i == 0 else total + c
            thetas.append(th)
            nxt.append(xn)
            if record:
                rows.append((s, t, i, x[i].copy(), u, th, c))
        residual = max(residual, inst.coupling.residual(t, np.concatenate(thetas)))
        stage[t] = total
        if flagged:
            stage[t + 1:] = 0.0
            break
        x = nxt
    cost = None
    for i, unit in enumerate(inst.units):
        k = float(unit.final_cost(x[i])) if not flagged else 0.0
        cost = k if i == 0 else cost + k
    for t in reversed(range(T)):
        cost = stage[t] + cost
    if flagged:
        cost = np.inf
    return cost, residual, flagged, rows


def simulate_policy(spec: PolicySpec, n: int, seed: int, workers: int = 1,
                    record: bool = False, chunk: int = 256) -> SimulationReport:
    """Monte Carlo estimate of the policy's expected cost.

    Scenario ``s`` draws its noise from its own counter-based stream keyed
    by ``(seed, s)``, so results do not depend on ``workers``.  The mean is
    accumulated with exact (``math.fsum``) summation around the first cost.
    """
    if n < 2:
        raise ModelError("at least two scenarios are required")

    def run(block):
        return [_run_scenario(spec, s, seed, record) for s in block]

    blocks = [range(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    if workers <= 1:
        parts = [run(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    results = [r for part in parts for r in part]
    costs = np.array([r[0] for r in results])
    residual = max(r[1] for r in results)
    flagged = sum(r[2] for r in results)
    if np.all(np.isfinite(costs)):
        c0 = costs[0]
        dev = costs - c0
        mean = c0 + math.fsum(dev) / n
        sd = float(np.std(dev, ddof=1))
        half = Z95 * sd / math.sqrt(n)
    else:
        mean, half = np.inf, np.inf
    traj = [row for r in results for row in r[3]] if record else None
    return SimulationReport(spec.name, float(mean), float(half), n, seed, residual,
                            flagged, costs, traj)
