"""Microgrid instances: buildings with batteries and hot-water tanks on a graph.

Each node stores energy in an optional battery and an electrical hot-water
tank.  Controls are stored-energy increments (battery ``b``, tank heat
``h``) plus one declared inflow per incident arc.  Kirchhoff coupling says
that the two declarations of an arc cancel, which is a sum-to-zero row per
arc.  Noise is two-dimensional per node: net electricity demand (demand
minus solar production, kW) and hot-water draw (kWh).

Stored energies and hot-water draws live on a common energy step, so the
dynamics map lattice points to lattice points.  Transitions that overflow
or underflow a storage, exceed a power rating or exceed an arc capacity
are forbidden (+inf cost).

The module also defines a small generic ``storage`` unit used for
randomized tests.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .model import (
    CouplingSubspace,
    DiscreteDistribution,
    InformationStructure,
    Lattice,
    ModelError,
    NoiseModel,
    ProblemInstance,
    TimeGrid,
    UnitSpec,
)

EPS = 1e-9


@dataclass(frozen=True)
class BatteryParams:
    capacity: float
    max_power: float
    rho_c: float = 0.95
    rho_d: float = 0.95

    def violations(self) -> list[str]:
        out = []
        if not self.capacity > 0:
            out.append("battery capacity must be positive")
        if not self.max_power > 0:
            out.append("battery power must be positive")
        for name in ("rho_c", "rho_d"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                out.append(f"battery efficiency {name}={v} outside (0, 1]")
        return out


@dataclass(frozen=True)
class TankParams:
    capacity: float
    max_power: float
    beta: float = 0.95

    def violations(self) -> list[str]:
        out = []
        if not self.capacity > 0:
            out.append("tank capacity must be positive")
        if not self.max_power > 0:
            out.append("tank heating power must be positive")
        if not 0 < self.beta <= 1:
            out.append(f"heater efficiency {self.beta} outside (0, 1]")
        return out


@dataclass(frozen=True)
class DemandSpec:
    """Per-stage synthetic demand laws.

    Net electricity demand takes ``elec[t] - solar[t] + spread * s`` with
    ``s`` in {-1, 1} (or {-1, 0, 1} with weights 1/4, 1/2, 1/4 when
    ``three_point``).  Hot-water draw is ``hot_water[t]`` with probability
    ``hot_water_prob[t]`` and 0 otherwise.
    """

    elec: tuple
    solar: tuple = ()
    spread: float = 0.0
    hot_water: tuple = ()
    hot_water_prob: tuple = ()
    three_point: bool = False

    def laws(self, horizon: int) -> list[DiscreteDistribution]:
        solar = self.solar or (0.0,) * horizon
        hw = self.hot_water or (0.0,) * horizon
        hwp = self.hot_water_prob or (0.0,) * horizon
        if self.three_point:
            shifts, sprob = (-1.0, 0.0, 1.0), (0.25, 0.5, 0.25)
        else:
            shifts, sprob = (-1.0, 1.0), (0.5, 0.5)
        out = []
        for t in range(horizon):
            base = round(self.elec[t] - solar[t], 10)
            e_vals = [round(base + self.spread * s, 10) for s in shifts] if self.spread else [base]
            e_prob = list(sprob) if self.spread else [1.0]
            q = float(hwp[t])
            if hw[t] > 0 and 0 < q < 1:
                h_vals, h_prob = [0.0, float(hw[t])], [1.0 - q, q]
            elif hw[t] > 0 and q >= 1:
                h_vals, h_prob = [float(hw[t])], [1.0]
            else:
                h_vals, h_prob = [0.0], [1.0]
            vals = [(e, h) for e in e_vals for h in h_vals]
            probs = [pe * ph for pe in e_prob for ph in h_prob]
            out.append(DiscreteDistribution(np.array(vals), np.array(probs)))
        return out


@dataclass(frozen=True)
class NodeSpec:
    name: str
    tank: TankParams
    demand: DemandSpec
    tariff: tuple
    battery: BatteryParams | None = None
    terminal_penalty: float = 0.0


@dataclass(frozen=True)
class Topology:
    nodes: tuple
    arcs: tuple
    capacities: tuple

    def violations(self) -> list[str]:
        out = []
        index = {n: k for k, n in enumerate(self.nodes)}
        if len(index) != len(self.nodes):
            out.append("duplicate node names")
        if len(self.capacities) != len(self.arcs):
            out.append("one capacity per arc is required")
        for k, (a, b) in enumerate(self.arcs):
            if a not in index or b not in index:
                out.append(f"arc {k} references an unknown node")
            elif a == b:
                out.append(f"arc {k} is a self-loop")
        for k, c in enumerate(self.capacities):
            if c < 0:
                out.append(f"arc {k} has negative capacity")
        return out

    def connected(self) -> bool:
        if not self.nodes:
            return True
        adj = {n: set() for n in self.nodes}
        for a, b in self.arcs:
            adj[a].add(b)
            adj[b].add(a)
        seen, stack = {self.nodes[0]}, [self.nodes[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.nodes)

    def incident(self, node) -> list[int]:
        return [k for k, arc in enumerate(self.arcs) if node in arc]


@dataclass(frozen=True)
class Resolution:
    """Discretization: energy step (kWh), flow step (kW), control ranges in steps."""

    energy_step: float = 1.0
    flow_step: float = 1.0
    battery_moves: int = 1
    heat_moves: int = 2


def _grid(lo, hi, step) -> Lattice:
    return Lattice.from_steps(lo, hi, step)


def node_unit(name: str, params: dict) -> UnitSpec:
    """Microgrid node from its (JSON-friendly) parameter dictionary."""
    p = params
    dt = float(p["dt"])
    e = float(p["energy_step"])
    fstep = float(p["flow_step"])
    bat = p.get("battery")
    tank = p["tank"]
    caps = [float(c) for c in p["arc_caps"]]
    tariff = np.asarray(p["tariff"], float)
    penalty = float(p.get("terminal_penalty", 0.0))
    has_bat = bat is not None

    lo, hi, st = [], [], []
    if has_bat:
        lo.append(0.0), hi.append(float(bat["capacity"])), st.append(e)
    lo.append(0.0), hi.append(float(tank["capacity"])), st.append(e)
    for cap, s in zip(hi, st):
        if abs(cap / s - round(cap / s)) > EPS:
            raise ModelError(f"node {name}: storage capacity {cap} is not a multiple of "
                             f"the energy step {s}")
    states = _grid(lo, hi, st)

    clo, chi, cst = [], [], []
    if has_bat:
        nb = int(p["battery_moves"])
        clo.append(-nb * e), chi.append(nb * e), cst.append(e)
    nh = int(p["heat_moves"])
    clo.append(0.0), chi.append(nh * e), cst.append(e)
    for cap in caps:
        nf = max(1, math.ceil(cap / fstep - EPS))
        clo.append(-nf * fstep), chi.append(nf * fstep), cst.append(fstep)
    controls = _grid(clo, chi, cst)

    ib = 0 if has_bat else None
    it = 1 if has_bat else 0
    n_arcs = len(caps)
    cap_arr = np.array(caps)
    s_hi = np.array(hi)

    def dyn(t, x, u, w):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        w = np.asarray(w, float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], w.shape[:-1])
        nxt = np.empty(shape + (states.dim,))
        if has_bat:
            nxt[..., ib] = x[..., ib] + u[..., ib]
        nxt[..., it] = x[..., it] + u[..., it] - w[..., 1]
        return nxt

    def grid_power(u):
        heat = u[..., it] / (dt * float(tank["beta"]))
        if not has_bat:
            return np.zeros_like(heat), heat
        b = u[..., ib]
        bp = np.where(b > 0, b / (dt * float(bat["rho_c"])), b * float(bat["rho_d"]) / dt)
        return bp, heat

    def cost(t, x, u, w):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        w = np.asarray(w, float)
        nxt = dyn(t, x, u, w)
        bp, heat = grid_power(u)
        inflow = np.sum(u[..., it + 1:], axis=-1) if n_arcs else 0.0
        net = w[..., 0] + bp + heat - inflow
        c = tariff[t] * dt * np.maximum(net, 0.0)
        bad = np.any((nxt < -EPS) | (nxt > s_hi + EPS), axis=-1)
        if has_bat:
            bad = bad | (np.abs(bp) > float(bat["max_power"]) + EPS)
        bad = bad | (heat > float(tank["max_power"]) + EPS)
        if n_arcs:
            bad = bad | np.any(np.abs(u[..., it + 1:]) > cap_arr + EPS, axis=-1)
        return np.where(bad, np.inf, c)

    def final_cost(x):
        x = np.asarray(x, float)
        if penalty == 0.0:
            return np.zeros(x.shape[:-1])
        return penalty * np.sum(s_hi - x, axis=-1)

    def coupling(t, x, u):
        u = np.asarray(u, float)
        return u[..., it + 1:]

    return UnitSpec(name, states, controls, dyn, cost, final_cost, coupling, n_arcs,
                    kind="microgrid_node", params=params)


def _node_params(node: NodeSpec, caps, dt, res: Resolution) -> dict:
    return {
        "dt": dt,
        "energy_step": res.energy_step,
        "flow_step": res.flow_step,
        "battery_moves": res.battery_moves,
        "heat_moves": res.heat_moves,
        "battery": asdict(node.battery) if node.battery is not None else None,
        "tank": asdict(node.tank),
        "tariff": [float(v) for v in node.tariff],
        "arc_caps": [float(c) for c in caps],
        "terminal_penalty": node.terminal_penalty,
    }


def build_instance(topology: Topology, nodes, time: TimeGrid, resolution: Resolution | None = None,
                   dt: float = 1.0, x0=None,
                   information: InformationStructure = InformationStructure.CENTRALIZED,
                   name: str = "") -> ProblemInstance:
    """Assemble a microgrid :class:`ProblemInstance`.

    ``nodes`` follows ``topology.nodes``.  Node ``i`` couples one declared
    inflow per incident arc (in arc order), and each arc ``{i, j}`` adds
    the row ``y_(i,a) + y_(j,a) = 0``.  Storages start empty unless ``x0``
    is given.
    """
    res = resolution or Resolution()
    T = time.horizon
    problems = topology.violations()
    if len(nodes) != len(topology.nodes):
        problems.append("one NodeSpec per topology node is required")
    for k, node in enumerate(nodes):
        sub = node.tank.violations() + (node.battery.violations() if node.battery else [])
        problems += [f"node {k} ({node.name}): {m}" for m in sub]
        if len(node.tariff) != T or min(node.tariff) < 0:
            problems.append(f"node {k} ({node.name}): tariff needs {T} non-negative values")
        if len(node.demand.elec) != T:
            problems.append(f"node {k} ({node.name}): demand profile needs {T} values")
        for hw in node.demand.hot_water:
            if abs(hw / res.energy_step - round(hw / res.energy_step)) > EPS:
                problems.append(f"node {k} ({node.name}): hot-water draw {hw} is off the "
                                f"energy grid")
                break
    if problems:
        raise ModelError("; ".join(problems))
    if not topology.connected():
        warnings.warn("microgrid topology is not connected", stacklevel=2)

    units, laws, groups = [], [], {}
    for i, (label, node) in enumerate(zip(topology.nodes, nodes)):
        arcs = topology.incident(label)
        caps = [topology.capacities[a] for a in arcs]
        units.append(node_unit(node.name, _node_params(node, caps, dt, res)))
        laws.append(node.demand.laws(T))
        for comp, a in enumerate(arcs):
            groups.setdefault(a, []).append((i, comp))
    dims = [u.coupling_dim for u in units]
    coupling = CouplingSubspace.sum_to_zero([groups[a] for a in sorted(groups)], dims)
    if x0 is None:
        x0 = [np.zeros(u.states_at(0).dim) for u in units]
    return ProblemInstance(time, units, NoiseModel(laws), coupling, x0, information, name)


def deterministic_variant(instance: ProblemInstance) -> ProblemInstance:
    """Same instance with every noise law collapsed to its most probable point."""
    laws = [[DiscreteDistribution.point(d.values[int(np.argmax(d.probs))]) for d in seq]
            for seq in instance.noise.dists]
    return instance.replace(noise=NoiseModel(laws), name=instance.name + "-det")


def _day(T: int, lo: float, hi: float, phase: float = 0.0) -> tuple:
    """Day-shaped profile rounded to 2 decimals: low at night, peak mid-horizon."""
    t = (np.arange(T) + 0.5) / T
    v = lo + (hi - lo) * np.sin(np.pi * np.clip(t + phase, 0, 1)) ** 2
    return tuple(round(float(x), 2) for x in v)


def _micro2() -> ProblemInstance:
    T = 4
    tariff = (0.10, 0.25, 0.30, 0.15)
    a = NodeSpec(
        "A",
        TankParams(3.0, 2.5, 0.95),
        DemandSpec(elec=(1.0, 1.5, 2.0, 1.2), spread=0.4, hot_water=(1.0,) * T,
                   hot_water_prob=(0.5,) * T),
        tariff,
        battery=BatteryParams(2.0, 1.25, 0.9, 0.9),
    )
    b = NodeSpec(
        "B",
        TankParams(3.0, 2.5, 0.95),
        DemandSpec(elec=(0.8, 0.9, 1.0, 0.8), solar=(0.3, 1.9, 2.5, 0.5), spread=0.5,
                   hot_water=(1.0,) * T, hot_water_prob=(0.3,) * T),
        tariff,
    )
    topo = Topology(("A", "B"), (("A", "B"),), (1.0,))
    return build_instance(topo, [a, b], TimeGrid(T, "1h"), name="micro-2")


def _micro3() -> ProblemInstance:
    T = 8
    tariff = (0.08, 0.08, 0.20, 0.28, 0.30, 0.22, 0.25, 0.12)
    solar = _day(T, 0.0, 2.6)
    nodes = [
        NodeSpec("A", TankParams(3.0, 2.5, 0.95),
                 DemandSpec(elec=_day(T, 0.6, 1.8, 0.2), spread=0.4,
                            hot_water=(1.0,) * T, hot_water_prob=(0.4,) * T),
                 tariff, battery=BatteryParams(2.0, 1.25, 0.9, 0.9)),
        NodeSpec("B", TankParams(3.0, 2.5, 0.95),
                 DemandSpec(elec=_day(T, 0.5, 1.0), solar=solar, spread=0.5,
                            hot_water=(1.0,) * T, hot_water_prob=(0.3,) * T),
                 tariff),
        NodeSpec("C", TankParams(3.0, 2.5, 0.95),
                 DemandSpec(elec=_day(T, 0.7, 1.5, 0.1), spread=0.3,
                            hot_water=(1.0,) * T, hot_water_prob=(0.5,) * T),
                 tariff),
    ]
    topo = Topology(("A", "B", "C"), (("A", "B"), ("B", "C"), ("A", "C")), (1.0, 1.0, 1.0))
    return build_instance(topo, nodes, TimeGrid(T, "1h"), name="micro-3")


def _meso6() -> ProblemInstance:
    T = 12
    tariff = tuple(round(0.10 + 0.2 * v, 3) for v in _day(T, 0.0, 1.0, 0.15))
    solar = _day(T, 0.0, 2.6)
    nodes = []
    for k in range(6):
        has_bat = k in (0, 3)
        has_pv = k in (1, 2, 4)
        nodes.append(NodeSpec(
            "N%d" % k,
            TankParams(3.0, 2.5, 0.95),
            DemandSpec(elec=_day(T, 0.5 + 0.1 * k, 1.4 + 0.1 * (k % 3), 0.05 * k),
                       solar=solar if has_pv else (), spread=0.3 + 0.05 * (k % 2),
                       hot_water=(1.0,) * T, hot_water_prob=(0.3 + 0.05 * k,) * T),
            tariff,
            battery=BatteryParams(2.0, 1.25, 0.9, 0.9) if has_bat else None,
        ))
    names = tuple("N%d" % k for k in range(6))
    arcs = tuple((names[k], names[(k + 1) % 6]) for k in range(6)) + ((names[0], names[3]),)
    topo = Topology(names, arcs, (1.0,) * 7)
    return build_instance(topo, nodes, TimeGrid(T, "1h"), name="meso-6")


SHIPPED = {"micro-2": _micro2, "micro-3": _micro3, "meso-6": _meso6}


def shipped_instance(name: str, deterministic_noise: bool = False) -> ProblemInstance:
    try:
        inst = SHIPPED[name]()
    except KeyError:
        raise ModelError(f"unknown shipped instance {name!r}; known: {sorted(SHIPPED)}") from None
    return deterministic_variant(inst) if deterministic_noise else inst


def shipped_instances(deterministic_noise: bool = False) -> dict:
    """Named desk-scale instances, in increasing size."""
    return {name: shipped_instance(name, deterministic_noise) for name in SHIPPED}


# -- generic storage unit ----------------------------------------------------

def storage_unit(name: str, params: dict) -> UnitSpec:
    """Scalar storage ``x' = x + u - w`` on ``0..capacity`` with coupling ``theta * u``.

    Stage cost is ``quad[t] * u**2 + lin[t] * u + waste * w``, final cost
    ``final * (capacity - x) + final_quad * (x - target)**2``; leaving the
    storage range is forbidden.  ``step`` is the lattice spacing of both
    state and control, unless ``u_lower``, ``u_upper`` and ``u_count`` give
    the control lattice explicitly.
    """
    cap = float(params["capacity"])
    step = float(params.get("step", 1.0))
    k = int(params.get("moves", 1))
    quad = np.asarray(params["quad"], float)
    lin = np.asarray(params["lin"], float)
    waste = float(params.get("waste", 0.0))
    theta = float(params.get("theta", 1.0))
    final = float(params.get("final", 0.0))
    final_quad = float(params.get("final_quad", 0.0))
    target = float(params.get("target", 0.0))
    coupled = bool(params.get("coupled", True))
    states = Lattice.from_steps(0.0, cap, step)
    if "u_count" in params:
        controls = Lattice(params["u_lower"], params["u_upper"], params["u_count"])
    else:
        controls = Lattice.from_steps(-k * step, k * step, step)

    def dyn(t, x, u, w):
        return np.asarray(x, float) + np.asarray(u, float) - np.asarray(w, float)

    def cost(t, x, u, w):
        u0 = np.asarray(u, float)[..., 0]
        nxt = dyn(t, x, u, w)[..., 0]
        c = quad[t] * u0 ** 2 + lin[t] * u0 + waste * np.asarray(w, float)[..., 0]
        return np.where((nxt < -EPS) | (nxt > cap + EPS), np.inf, c)

    def final_cost(x):
        x = np.asarray(x, float)[..., 0]
        return final * (cap - x) + final_quad * (x - target) ** 2

    def coupling(t, x, u):
        return theta * np.asarray(u, float)

    return UnitSpec(name, states, controls, dyn, cost, final_cost, coupling,
                    1 if coupled else 0, kind="storage", params=params)


def random_storage_instance(rng: np.random.Generator, n_units: int = 2, horizon: int = 2,
                            capacity: int = 2, moves: int = 1, noise_points: int = 2,
                            fractional: bool = False,
                            information=InformationStructure.CENTRALIZED) -> ProblemInstance:
    """Random oracle-sized instance of storages whose coupled outputs sum to zero.

    With ``fractional`` some draws fall between lattice points, so the
    tabulated kernels split mass over cell corners.
    """
    units, laws, x0 = [], [], []
    for i in range(n_units):
        params = {
            "capacity": float(capacity),
            "moves": moves,
            "quad": np.round(rng.uniform(0.1, 2.0, horizon), 3).tolist(),
            "lin": np.round(rng.uniform(-1.0, 1.0, horizon), 3).tolist(),
            "waste": round(float(rng.uniform(0.0, 0.5)), 3),
            "final": round(float(rng.uniform(0.0, 1.0)), 3),
        }
        units.append(storage_unit(f"s{i}", params))
        seq = []
        for _ in range(horizon):
            if fractional:
                vals = np.round(rng.uniform(0.0, 1.0, noise_points), 2)
            else:
                vals = rng.integers(0, 2, noise_points).astype(float)
            p = rng.dirichlet(np.ones(noise_points))
            p = p / p.sum()
            p[-1] = 1.0 - p[:-1].sum()
            seq.append(DiscreteDistribution(vals, p))
        laws.append(seq)
        x0.append([float(rng.integers(0, capacity + 1))])
    coupling = CouplingSubspace.sum_to_zero([[(i, 0) for i in range(n_units)]], [1] * n_units)
    return ProblemInstance(TimeGrid(horizon), units, NoiseModel(laws), coupling, x0,
                           information, name="random-storage")


def enumeration_instance(information=InformationStructure.CENTRALIZED) -> ProblemInstance:
    """Two storages, T=2, binary controls, independent two-point noises, outputs summing to zero.

    Unit 0 would like to react to its own draws while unit 1 has slack,
    so sharing information across units pays off.
    """
    units, laws = [], []
    specs = [(4.0, 2.0, (0.1, 0.0), 1.0), (8.0, 4.0, (0.0, 0.0), 0.1)]
    for i, (cap, target, lin, fq) in enumerate(specs):
        units.append(storage_unit(f"s{i}", {
            "capacity": cap, "u_lower": -1.0, "u_upper": 1.0, "u_count": 2,
            "quad": [0.0, 0.0], "lin": list(lin), "final_quad": fq, "target": target,
        }))
        laws.append([DiscreteDistribution([0.0, 1.0], [0.5, 0.5]) for _ in range(2)])
    coupling = CouplingSubspace.sum_to_zero([[(0, 0), (1, 0)]], [1, 1])
    return ProblemInstance(TimeGrid(2), units, NoiseModel(laws), coupling, [[2.0], [4.0]],
                           information, name="pair-2")


UNIT_KINDS = {"microgrid_node": node_unit, "storage": storage_unit}


def unit_from_params(kind: str, name: str, params: dict) -> UnitSpec:
    try:
        factory = UNIT_KINDS[kind]
    except KeyError:
        raise ModelError(f"unknown unit kind {kind!r}; known: {sorted(UNIT_KINDS)}") from None
    return factory(name, params)
