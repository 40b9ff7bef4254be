"""Lattice tabulation of a unit: expected costs, coupling values, transition kernels.

Multilinear interpolation weights are non-negative and sum to one, so
``prob(w) * weight(corner)`` is a stochastic kernel on the next-stage
lattice.  A tabulated unit is therefore a finite Markov decision process,
and every backward recursion in the package runs on that process.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .model import ModelError, UnitSpec, Violation


@dataclass(frozen=True, eq=False)
class StageTable:
    """Stage-t arrays of one unit; rows of ``trans`` are ``x * n_controls + u``."""

    states: np.ndarray        # (nx, d)
    controls: np.ndarray      # (nu, c)
    exp_cost: np.ndarray      # (nx, nu), +inf where some positive-probability outcome is forbidden
    theta: np.ndarray         # (nx, nu, m)
    trans: sp.csr_matrix      # (nx * nu, nx_next)
    support: sp.csr_matrix    # same pattern as trans, unit entries

    @property
    def n_states(self) -> int:
        return self.exp_cost.shape[0]

    @property
    def n_controls(self) -> int:
        return self.exp_cost.shape[1]

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """``E[interp(values, g(x, u, W))]`` for every lattice pair, shape ``(nx, nu)``.

        A +inf corner with positive weight makes the expectation +inf.
        """
        inf = np.isinf(values)
        ev = self.trans @ np.where(inf, 0.0, values)
        if inf.any():
            hit = (self.support @ inf.astype(float)) > 0
            ev[hit] = np.inf
        return ev.reshape(self.n_states, self.n_controls)


@dataclass(frozen=True, eq=False)
class UnitTable:
    index: int
    name: str
    stages: tuple             # StageTable per t in 0..T-1
    final: np.ndarray         # K on the stage-T lattice
    lattices: tuple           # state lattices, t in 0..T
    control_lattices: tuple   # t in 0..T-1

    @property
    def horizon(self) -> int:
        return len(self.stages)

    @cached_property
    def theta_grids(self) -> tuple:
        """Per stage, the distinct coupling vectors ``{Theta_t(x, u)}`` over the lattices."""
        return tuple(theta_labels(st.theta)[0] for st in self.stages)


def _broadcast_inputs(x, u, w):
    return x[:, None, None, :], u[None, :, None, :], w[None, None, :, :]


def _evaluate_stage(unit: UnitSpec, dist, t: int):
    xs = unit.states_at(t).points
    us = unit.controls_at(t).points
    ws = dist.values
    nx, nu, nw = len(xs), len(us), len(ws)
    X, U, W = _broadcast_inputs(xs, us, ws)
    cost = np.broadcast_to(np.asarray(unit.cost(t, X, U, W), float), (nx, nu, nw))
    nxt = np.asarray(unit.dynamics(t, X, U, W), float)
    d_next = unit.states_at(t + 1).dim
    nxt = np.broadcast_to(nxt, (nx, nu, nw, d_next))
    m = unit.coupling_dim
    if m == 0:
        theta = np.zeros((nx, nu, 0))
    else:
        theta = np.asarray(unit.coupling(t, xs[:, None, :], us[None, :, :]), float)
        if theta.shape[-1] != m:
            raise ModelError(f"unit {unit.name}: coupling output has {theta.shape[-1]} "
                             f"components, declared {m}")
        theta = np.broadcast_to(theta, (nx, nu, m))
    return xs, us, cost, nxt, theta


def _check_costs(cost) -> str | None:
    if np.any(np.isnan(cost)):
        return "stage cost evaluates to NaN"
    if np.any(cost == -np.inf):
        return "stage cost evaluates to -inf"
    return None


def tabulate_unit(unit: UnitSpec, noise, horizon: int, index: int = 0) -> UnitTable:
    stages = []
    for t in range(horizon):
        dist = noise[t]
        xs, us, cost, nxt, theta = _evaluate_stage(unit, dist, t)
        msg = _check_costs(cost)
        if msg:
            raise ModelError(f"unit {index} ({unit.name}), t={t}: {msg}")
        nx, nu, nw = cost.shape
        probs = dist.probs
        live = probs > 0
        finite = np.isfinite(cost) | ~live[None, None, :]
        allowed = finite.all(axis=2)
        exp_cost = np.where(allowed, np.sum(np.where(live, cost, 0.0) * probs, axis=2), np.inf)

        lat_next = unit.states_at(t + 1)
        use = allowed[:, :, None] & live[None, None, :]
        pts = nxt[use]
        inside = lat_next.contains(pts)
        if not np.all(inside):
            bad = np.argwhere(use)[~inside][0]
            raise ModelError(
                f"unit {index} ({unit.name}), t={t}: dynamics leave the next lattice at "
                f"state {xs[bad[0]]}, control {us[bad[1]]} with finite cost; forbid the "
                f"transition (+inf cost) or clip inside the evaluator")
        corner, weight = lat_next.interp_weights(pts)
        rows = np.argwhere(use)
        row_id = rows[:, 0] * nu + rows[:, 1]
        p = probs[rows[:, 2]]
        ncorner = corner.shape[1]
        data = (weight * p[:, None]).ravel()
        r = np.repeat(row_id, ncorner)
        c = corner.ravel()
        keep = data > 0
        trans = sp.csr_matrix((data[keep], (r[keep], c[keep])), shape=(nx * nu, lat_next.size))
        trans.sum_duplicates()
        support = trans.copy()
        support.data = np.ones_like(support.data)
        theta = np.array(theta)
        exp_cost.setflags(write=False)
        stages.append(StageTable(xs, us, exp_cost, theta, trans, support))

    lat_T = unit.states_at(horizon)
    final = np.broadcast_to(np.asarray(unit.final_cost(lat_T.points), float), (lat_T.size,)).copy()
    if np.any(np.isnan(final)) or np.any(final == -np.inf):
        raise ModelError(f"unit {index} ({unit.name}): final cost is NaN or -inf")
    final.setflags(write=False)
    return UnitTable(
        index=index,
        name=unit.name,
        stages=tuple(stages),
        final=final,
        lattices=tuple(unit.states_at(t) for t in range(horizon + 1)),
        control_lattices=tuple(unit.controls_at(t) for t in range(horizon)),
    )


def tabulation_violations(unit: UnitSpec, noise, horizon: int, index: int = 0) -> list[Violation]:
    out = []
    for t in range(horizon):
        try:
            xs, us, cost, nxt, theta = _evaluate_stage(unit, noise[t], t)
        except Exception as exc:  # evaluator failures are reported, not raised
            out.append(Violation("evaluators", f"evaluation failed: {exc}", index, t))
            continue
        msg = _check_costs(cost)
        if msg:
            out.append(Violation("stage cost", msg, index, t))
        live = noise[t].probs > 0
        use = np.isfinite(cost) & live[None, None, :]
        if use.any() and not np.all(unit.states_at(t + 1).contains(nxt[use])):
            out.append(Violation("dynamics", "next state leaves the lattice box with finite cost",
                                 index, t))
    lat_T = unit.states_at(horizon)
    final = np.asarray(unit.final_cost(lat_T.points), float)
    if np.any(np.isnan(final)) or np.any(final == -np.inf):
        out.append(Violation("final cost", "NaN or -inf value", index, horizon))
    return out


def theta_labels(theta: np.ndarray, decimals: int = 9):
    """Unique coupling vectors of a ``(nx, nu, m)`` table and the label of every pair."""
    nx, nu, m = theta.shape
    if m == 0:
        return np.zeros((1, 0)), np.zeros((nx, nu), dtype=np.int64)
    flat = np.round(theta.reshape(nx * nu, m), decimals) + 0.0
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    return uniq, inv.reshape(nx, nu)
