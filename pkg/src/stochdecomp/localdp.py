"""Per-unit backward Dynamic Programming for price and resource subproblems.

Both solvers work on a :class:`~stochdecomp.tabulate.UnitTable`; expectations
over the discrete noise are exact sums and controls range over the control
lattice.  The price solver adds ``<p_t, Theta_t(x, u)>`` to the stage cost;
the resource solver keeps only controls with ``Theta_t(x, u) = r_t``.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Lattice, ModelError, UnitSpec
from .tabulate import UnitTable, tabulate_unit

RESOURCE_TOL = 1e-9
INFEASIBLE = -1


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Tabulated value function of one unit, ``values[t]`` on ``lattices[t]``."""

    unit: int
    lattices: tuple
    values: tuple

    @property
    def horizon(self) -> int:
        return len(self.values) - 1

    def __call__(self, t: int, x) -> float:
        return interp(self.lattices[t], self.values[t], x)

    def at_index(self, t: int, k: int) -> float:
        return float(self.values[t][k])


@dataclass(frozen=True, eq=False)
class FeedbackTable:
    """Argmin control index per lattice state; :data:`INFEASIBLE` marks empty sets."""

    unit: int
    control_lattices: tuple
    indices: tuple

    def control(self, t: int, k: int):
        j = int(self.indices[t][k])
        if j == INFEASIBLE:
            return None
        return self.control_lattices[t].points[j]


def interp(lattice: Lattice, values: np.ndarray, x) -> float:
    """Multilinear interpolation of a stage slice at one point.

    Any positive-weight corner at +inf makes the result +inf.
    """
    x = np.asarray(x, float).reshape(1, -1)
    if x.shape[1] != lattice.dim:
        raise ModelError(f"point has dimension {x.shape[1]}, lattice {lattice.dim}")
    if not lattice.contains(x)[0]:
        raise ModelError(f"point {x[0]} lies outside the lattice bounding box")
    idx, w = lattice.interp_weights(x)
    idx, w = idx[0], w[0]
    pos = w > 0
    vals = np.asarray(values)[idx[pos]]
    if np.any(np.isinf(vals)):
        return np.inf
    if pos.sum() == 1:
        return float(vals[0])
    return float(np.dot(w[pos], vals))


def _as_table(unit, noise, horizon) -> UnitTable:
    if isinstance(unit, UnitTable):
        return unit
    if not isinstance(unit, UnitSpec):
        raise TypeError("expected a UnitSpec or a UnitTable")
    if noise is None or horizon is None:
        raise ModelError("a UnitSpec needs its noise laws and horizon")
    return tabulate_unit(unit, noise, horizon)


def _stage_vectors(vectors, table: UnitTable, name: str) -> list[np.ndarray]:
    vectors = [np.asarray(v, float).reshape(-1) for v in vectors]
    if len(vectors) != table.horizon:
        raise ModelError(f"{name} has {len(vectors)} stages, unit has {table.horizon}")
    for t, v in enumerate(vectors):
        m = table.stages[t].theta.shape[2]
        if v.shape[0] != m:
            raise ModelError(f"{name} at t={t} has length {v.shape[0]}, unit couples {m}")
    return vectors


def _backward(table: UnitTable, stage_q):
    T = table.horizon
    values = [None] * (T + 1)
    fb = [None] * T
    values[T] = np.array(table.final)
    for t in reversed(range(T)):
        st = table.stages[t]
        q = stage_q(t, st, st.expected_next(values[t + 1]))
        j = np.argmin(q, axis=1)
        v = q[np.arange(q.shape[0]), j]
        j = np.where(np.isinf(v), INFEASIBLE, j)
        values[t] = v
        fb[t] = j
    for v in values:
        v.setflags(write=False)
    for j in fb:
        j.setflags(write=False)
    return (ValueTable(table.index, table.lattices, tuple(values)),
            FeedbackTable(table.index, table.control_lattices, tuple(fb)))


def solve_price_dp(unit, price: Sequence, noise=None, horizon=None):
    """Local price value function and feedback for a deterministic price.

    ``unit`` is a :class:`UnitSpec` (then ``noise`` laws are required) or an
    already tabulated :class:`UnitTable`.  ``price[t]`` is the unit's price
    vector at stage ``t``.
    """
    table = _as_table(unit, noise, horizon if horizon is not None else len(price))
    price = _stage_vectors(price, table, "price")

    def stage_q(t, st, ev):
        penalty = st.theta @ price[t] if st.theta.shape[2] else np.zeros_like(st.exp_cost)
        return (st.exp_cost + penalty) + ev

    return _backward(table, stage_q)


def solve_unconstrained_dp(unit, noise=None, horizon=None):
    """Local DP without any coupling term."""
    table = _as_table(unit, noise, horizon)
    return _backward(table, lambda t, st, ev: st.exp_cost + ev)


def solve_resource_dp(unit, resource: Sequence, noise=None, horizon=None,
                      tol: float = RESOURCE_TOL):
    """Local resource value function: controls restricted to ``Theta_t(x, u) = r_t``.

    Matching uses ``max |Theta - r| <= tol``; an empty admissible set gives +inf.
    """
    table = _as_table(unit, noise, horizon if horizon is not None else len(resource))
    resource = _stage_vectors(resource, table, "resource")

    def stage_q(t, st, ev):
        q = st.exp_cost + ev
        if st.theta.shape[2]:
            off = np.max(np.abs(st.theta - resource[t]), axis=2) > tol
            q = np.where(off, np.inf, q)
        return q

    return _backward(table, stage_q)


def solve_batch(jobs, workers: int = 1):
    """Run independent ``(solver, args, kwargs)`` jobs; results keep job order."""
    def run(job):
        fn, args, kwargs = job
        return fn(*args, **kwargs)

    if workers <= 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


def table_digest(values: ValueTable) -> str:
    h = hashlib.sha256()
    for v in values.values:
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


def save_tables(path, values: ValueTable, feedback: FeedbackTable | None = None,
                instance_hash: str = "") -> None:
    """Write a value table (and optional feedback) to a ``.npz`` archive."""
    arrays = {
        "instance_hash": np.array(instance_hash),
        "unit": np.array(values.unit),
        "stages": np.array(values.horizon),
        "lattice_lower": np.array([lat.lower for lat in values.lattices], dtype=object),
        "lattice_upper": np.array([lat.upper for lat in values.lattices], dtype=object),
        "lattice_count": np.array([lat.count for lat in values.lattices], dtype=object),
    }
    for t, v in enumerate(values.values):
        arrays[f"value_{t}"] = np.ascontiguousarray(v, dtype="<f8")
    if feedback is not None:
        arrays["control_lower"] = np.array([l.lower for l in feedback.control_lattices], dtype=object)
        arrays["control_upper"] = np.array([l.upper for l in feedback.control_lattices], dtype=object)
        arrays["control_count"] = np.array([l.count for l in feedback.control_lattices], dtype=object)
        for t, j in enumerate(feedback.indices):
            arrays[f"feedback_{t}"] = np.ascontiguousarray(j, dtype="<i8")
    np.savez(path, **arrays)


def load_tables(path):
    """Inverse of :func:`save_tables`: ``(values, feedback or None, instance_hash)``."""
    with np.load(path, allow_pickle=True) as z:
        T = int(z["stages"])
        unit = int(z["unit"])
        lats = tuple(Lattice(lo, hi, n) for lo, hi, n in
                     zip(z["lattice_lower"], z["lattice_upper"], z["lattice_count"]))
        values = ValueTable(unit, lats, tuple(np.array(z[f"value_{t}"]) for t in range(T + 1)))
        fb = None
        if "feedback_0" in z.files:
            clats = tuple(Lattice(lo, hi, n) for lo, hi, n in
                          zip(z["control_lower"], z["control_upper"], z["control_count"]))
            fb = FeedbackTable(unit, clats, tuple(np.array(z[f"feedback_{t}"]) for t in range(T)))
        return values, fb, str(z["instance_hash"])
