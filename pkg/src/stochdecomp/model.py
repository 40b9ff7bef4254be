"""Problem instances: units, lattices, discrete noise, coupling subspaces.

A :class:`ProblemInstance` bundles a set of local control systems (units)
whose coupling outputs must lie, at each stage, in the kernel of a matrix
``A_t``.  Everything downstream works on finite lattices, so the instance
also carries the state and control discretization of every unit.

Evaluators (dynamics, costs, coupling maps) are plain callables that must
broadcast over leading array axes.  Their signatures are::

    dynamics(t, x, u, w) -> next state        (..., d)
    cost(t, x, u, w)     -> stage cost        (...)      +inf forbids
    final_cost(x)        -> terminal cost     (...)
    coupling(t, x, u)    -> coupling output   (..., m)
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable

import numpy as np

MEMBERSHIP_TOL = 1e-9
PROBABILITY_TOL = 1e-12


class ModelError(ValueError):
    """Raised when an instance or an input violates a structural contract."""


class InadmissibleError(ModelError):
    """A coordination process is outside S* (prices) or -S (resources)."""


@dataclass(frozen=True)
class TimeGrid:
    horizon: int
    step_label: str = ""

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ModelError(f"horizon must be >= 1, got {self.horizon}")


@dataclass(frozen=True)
class Lattice:
    """Regular tensor grid ``lower + k * spacing`` in each dimension."""

    lower: tuple
    upper: tuple
    count: tuple

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in np.atleast_1d(self.lower)))
        object.__setattr__(self, "upper", tuple(float(v) for v in np.atleast_1d(self.upper)))
        object.__setattr__(self, "count", tuple(int(v) for v in np.atleast_1d(self.count)))
        if not (len(self.lower) == len(self.upper) == len(self.count)) or not self.lower:
            raise ModelError("lattice bounds and counts must share a dimension >= 1")

    @classmethod
    def regular(cls, lower, upper, count):
        return cls(lower, upper, count)

    @classmethod
    def from_steps(cls, lower, upper, step):
        """Lattice with the given spacing; ``upper - lower`` must be a multiple of it."""
        lower, upper, step = (np.atleast_1d(np.asarray(v, float)) for v in (lower, upper, step))
        n = np.rint((upper - lower) / step).astype(int) + 1
        if not np.allclose(lower + (n - 1) * step, upper):
            raise ModelError("lattice extent is not a multiple of the step")
        return cls(lower, upper, n)

    @property
    def dim(self) -> int:
        return len(self.count)

    @property
    def size(self) -> int:
        return int(np.prod(self.count))

    @property
    def spacing(self) -> np.ndarray:
        lo, hi, n = np.array(self.lower), np.array(self.upper), np.array(self.count)
        return (hi - lo) / (n - 1)

    def violations(self) -> list[str]:
        out = []
        for k, (lo, hi, n) in enumerate(zip(self.lower, self.upper, self.count)):
            if not lo < hi:
                out.append(f"dimension {k}: lower {lo} is not below upper {hi}")
            if n < 2:
                out.append(f"dimension {k}: point count {n} < 2")
        return out

    @cached_property
    def axes(self) -> tuple:
        return tuple(
            lo + np.arange(n) * h if n > 1 else np.array([lo])
            for lo, n, h in zip(self.lower, self.count, self.spacing)
        )

    @cached_property
    def points(self) -> np.ndarray:
        """All lattice points, shape ``(size, dim)``, row-major (last axis fastest)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        # the last point of each axis is pinned to `upper` exactly
        for k, hi in enumerate(self.upper):
            pts[np.isclose(pts[:, k], hi, rtol=0, atol=1e-12), k] = hi
        pts.setflags(write=False)
        return pts

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        """Bounding-box membership for points of shape ``(..., dim)``."""
        x = np.asarray(x, float)
        slack = tol * np.maximum(1.0, self.spacing)
        lo = np.array(self.lower) - slack
        hi = np.array(self.upper) + slack
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def index_of(self, x, tol: float = MEMBERSHIP_TOL):
        """Flat index of ``x`` if it is a lattice point, else ``None``."""
        x = np.asarray(x, float).reshape(-1)
        if x.shape[0] != self.dim or not self.contains(x, tol):
            return None
        pos = (x - np.array(self.lower)) / self.spacing
        k = np.rint(pos)
        if np.any(np.abs(pos - k) * self.spacing > tol):
            return None
        k = np.clip(k.astype(int), 0, np.array(self.count) - 1)
        return int(np.ravel_multi_index(tuple(k), self.count))

    def interp_weights(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Corner indices and multilinear weights for points ``x`` of shape ``(n, dim)``.

        Returns arrays of shape ``(n, 2**dim)``.  Points must lie inside the
        bounding box (up to :data:`MEMBERSHIP_TOL`); weights within 1e-12 of
        0 or 1 are snapped so on-lattice points get a single unit weight.
        """
        x = np.asarray(x, float).reshape(-1, self.dim)
        if not np.all(self.contains(x)):
            raise ModelError("point outside the lattice bounding box")
        count = np.array(self.count)
        pos = (x - np.array(self.lower)) / self.spacing
        base = np.clip(np.floor(pos).astype(int), 0, count - 2)
        frac = np.clip(pos - base, 0.0, 1.0)
        frac[frac < 1e-12] = 0.0
        frac[frac > 1.0 - 1e-12] = 1.0
        n, d = x.shape
        ncorner = 1 << d
        idx = np.zeros((n, ncorner), dtype=np.int64)
        w = np.ones((n, ncorner))
        strides = np.array([int(np.prod(count[k + 1:])) for k in range(d)])
        for c in range(ncorner):
            for k in range(d):
                bit = (c >> (d - 1 - k)) & 1
                idx[:, c] += (base[:, k] + bit) * strides[k]
                w[:, c] *= frac[:, k] if bit else 1.0 - frac[:, k]
        return idx, w

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "count": list(self.count)}

    @classmethod
    def from_dict(cls, d) -> "Lattice":
        return cls(d["lower"], d["upper"], d["count"])


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite support ``values`` (k, dim) with probabilities ``probs`` (k,)."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, float)
        if values.ndim == 1:
            values = values[:, None]
        probs = np.asarray(self.probs, float).reshape(-1)
        values.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def point(cls, value) -> "DiscreteDistribution":
        return cls(np.atleast_1d(np.asarray(value, float))[None, :], [1.0])

    @property
    def size(self) -> int:
        return len(self.probs)

    def violations(self) -> list[str]:
        out = []
        if self.size == 0:
            out.append("empty support")
        if len(self.values) != self.size:
            out.append("support and probability lengths differ")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            out.append("probability outside [0, 1]")
        if abs(float(np.sum(self.probs)) - 1.0) > PROBABILITY_TOL:
            out.append(f"probability mass sums to {float(np.sum(self.probs))!r}")
        return out


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """``dists[i][t]`` is the law of unit i's noise entering stage t (W_{t+1}).

    Stage laws are independent of each other and across units; no other
    dependence structure is representable.
    """

    dists: tuple

    def __post_init__(self):
        object.__setattr__(self, "dists", tuple(tuple(d) for d in self.dists))

    def unit(self, i: int) -> tuple:
        return self.dists[i]


@dataclass(frozen=True, eq=False)
class UnitSpec:
    """One local control system.

    ``state_grid`` and ``control_grid`` are a single :class:`Lattice` or a
    per-stage sequence (T + 1 state lattices, T control lattices).
    ``kind``/``params`` identify a registered parametric family so the unit
    can be written to an instance file; units built from ad-hoc callables
    leave them unset.
    """

    name: str
    state_grid: Any
    control_grid: Any
    dynamics: Callable
    cost: Callable
    final_cost: Callable
    coupling: Callable
    coupling_dim: int
    kind: str | None = None
    params: dict | None = None

    def states_at(self, t: int) -> Lattice:
        g = self.state_grid
        return g if isinstance(g, Lattice) else g[t]

    def controls_at(self, t: int) -> Lattice:
        g = self.control_grid
        return g if isinstance(g, Lattice) else g[t]


class InformationStructure(enum.Enum):
    CENTRALIZED = "centralized"
    DECENTRALIZED = "decentralized"


def as_rows(a, width: int) -> np.ndarray:
    """``a`` as a float matrix with ``width`` columns (``reshape`` cannot infer rows when width is 0)."""
    a = np.asarray(a, float)
    if width == 0:
        return np.zeros((a.shape[0] if a.ndim == 2 else 0, 0))
    return a.reshape(-1, width)


def _full_row_rank(a: np.ndarray) -> bool:
    if a.shape[0] == 0:
        return True
    return np.linalg.matrix_rank(a) == a.shape[0]


@dataclass(frozen=True, eq=False)
class CouplingSubspace:
    """Per-stage ``S_t = ker(A_t)``; columns follow the concatenated unit outputs.

    ``dims[i]`` is the number of coupling outputs of unit ``i``.  A single
    matrix applies to every stage.
    """

    matrices: Any
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if isinstance(self.matrices, np.ndarray) and self.matrices.ndim == 2:
            mats = self.matrices
        elif isinstance(self.matrices, (list, tuple)) and self.matrices and np.ndim(self.matrices[0]) == 2:
            mats = tuple(as_rows(m, sum(self.dims)) for m in self.matrices)
        else:
            mats = self.matrices
        if not isinstance(mats, tuple):
            mats = as_rows(mats, sum(self.dims))
            mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def sum_to_zero(cls, groups, dims) -> "CouplingSubspace":
        """One row per group of ``(unit, component)`` pairs whose sum must vanish."""
        dims = tuple(int(d) for d in dims)
        offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        a = np.zeros((len(groups), int(offsets[-1])))
        for row, group in enumerate(groups):
            for unit, comp in group:
                if not 0 <= comp < dims[unit]:
                    raise ModelError(f"group {row}: unit {unit} has no coupling component {comp}")
                a[row, offsets[unit] + comp] += 1.0
        return cls(a, dims)

    @classmethod
    def uncoupled(cls, dims) -> "CouplingSubspace":
        return cls(np.zeros((0, int(sum(dims)))), dims)

    @property
    def width(self) -> int:
        return int(sum(self.dims))

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def matrix(self, t: int) -> np.ndarray:
        m = self.matrices
        return m if isinstance(m, np.ndarray) else m[t]

    def residual(self, t: int, y) -> float:
        a = self.matrix(t)
        if a.shape[0] == 0:
            return 0.0
        return float(np.max(np.abs(a @ np.asarray(y, float))))

    def split(self, y) -> list[np.ndarray]:
        y = np.asarray(y, float)
        return [y[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.dims))]

    def row_projector(self, t: int) -> np.ndarray:
        """Orthogonal projector onto ``row-space(A_t)`` (the dual cone of a subspace)."""
        a = self.matrix(t)
        if a.shape[0] == 0:
            return np.zeros((self.width, self.width))
        return a.T @ np.linalg.solve(a @ a.T, a)

    def kernel_basis(self, t: int) -> np.ndarray:
        """Reduced-row-echelon basis of ``ker(A_t)``, one vector per column.

        For incidence-like matrices the vectors have entries in {-1, 0, 1},
        which keeps moves along them on integer coupling grids.
        """
        a = np.array(self.matrix(t), float)
        n = self.width
        pivots = []
        row = 0
        for col in range(n):
            if row >= a.shape[0]:
                break
            piv = row + int(np.argmax(np.abs(a[row:, col])))
            if abs(a[piv, col]) < 1e-12:
                continue
            a[[row, piv]] = a[[piv, row]]
            a[row] /= a[row, col]
            for r in range(a.shape[0]):
                if r != row:
                    a[r] -= a[r, col] * a[row]
            pivots.append(col)
            row += 1
        free = [c for c in range(n) if c not in pivots]
        basis = np.zeros((n, len(free)))
        for j, f in enumerate(free):
            basis[f, j] = 1.0
            for r, pc in enumerate(pivots):
                basis[pc, j] = -a[r, f]
        basis[np.abs(basis) < 1e-14] = 0.0
        return basis


class CoordinationKind(enum.Enum):
    PRICE = "price"
    RESOURCE = "resource"


@dataclass(frozen=True, eq=False)
class CoordinationProcess:
    """Deterministic per-stage price or resource vectors.

    ``values[t]`` is the concatenation over units of the stage-t vectors,
    laid out like the columns of the coupling matrix.
    """

    kind: CoordinationKind
    values: tuple
    dims: tuple

    def __post_init__(self):
        vals = []
        for v in self.values:
            a = np.array(v, float).reshape(-1)
            a.setflags(write=False)
            vals.append(a)
        object.__setattr__(self, "values", tuple(vals))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def horizon(self) -> int:
        return len(self.values)

    def unit(self, i: int) -> list[np.ndarray]:
        lo = int(sum(self.dims[:i]))
        hi = lo + self.dims[i]
        return [v[lo:hi] for v in self.values]

    def stacked(self) -> np.ndarray:
        return np.stack(self.values) if self.values else np.zeros((0, sum(self.dims)))

    def same_as(self, other: "CoordinationProcess") -> bool:
        return self.kind == other.kind and all(
            np.array_equal(a, b) for a, b in zip(self.values, other.values)
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "dims": list(self.dims),
                "values": [v.tolist() for v in self.values]}

    @classmethod
    def from_dict(cls, d) -> "CoordinationProcess":
        return cls(CoordinationKind(d["kind"]), d["values"], d["dims"])

    @classmethod
    def zeros(cls, kind, horizon, dims) -> "CoordinationProcess":
        return cls(kind, [np.zeros(int(sum(dims)))] * horizon, dims)


@dataclass(frozen=True, eq=False)
class Violation:
    field: str
    message: str
    unit: int | None = None
    stage: int | None = None

    def __str__(self):
        where = []
        if self.unit is not None:
            where.append(f"unit {self.unit}")
        if self.stage is not None:
            where.append(f"t={self.stage}")
        loc = f" ({', '.join(where)})" if where else ""
        return f"{self.field}{loc}: {self.message}"


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    time: TimeGrid
    units: tuple
    noise: NoiseModel
    coupling: CouplingSubspace
    x0: tuple
    information: InformationStructure = InformationStructure.CENTRALIZED
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(
            self, "x0", tuple(np.atleast_1d(np.asarray(x, float)) for x in self.x0)
        )

    @property
    def horizon(self) -> int:
        return self.time.horizon

    @property
    def n_units(self) -> int:
        return len(self.units)

    @cached_property
    def tabulation(self):
        """Per-unit lattice tabulation (see :mod:`stochdecomp.tabulate`), computed once."""
        from .tabulate import tabulate_unit

        return tuple(
            tabulate_unit(u, self.noise.unit(i), self.horizon, index=i)
            for i, u in enumerate(self.units)
        )

    def x0_index(self, i: int) -> int:
        k = self.units[i].states_at(0).index_of(self.x0[i])
        if k is None:
            raise ModelError(f"initial state of unit {i} is not a lattice point")
        return k

    def replace(self, **changes) -> "ProblemInstance":
        fields_ = dict(time=self.time, units=self.units, noise=self.noise,
                       coupling=self.coupling, x0=self.x0,
                       information=self.information, name=self.name)
        fields_.update(changes)
        return ProblemInstance(**fields_)


def validate_instance(instance: ProblemInstance) -> list[Violation]:
    """Every invariant violation of ``instance``; an empty list means valid."""
    out: list[Violation] = []
    T = instance.horizon
    if T < 1:
        out.append(Violation("time", "horizon must be >= 1"))
    if instance.n_units < 1:
        out.append(Violation("units", "at least one unit is required"))
        return out

    if len(instance.noise.dists) != instance.n_units:
        out.append(Violation("noise", "one noise sequence per unit is required"))
    if len(instance.x0) != instance.n_units:
        out.append(Violation("initial state", "one initial state per unit is required"))

    for i, unit in enumerate(instance.units):
        for t in range(T + 1):
            for msg in unit.states_at(t).violations():
                out.append(Violation("state lattice", msg, i, t))
        for t in range(T):
            for msg in unit.controls_at(t).violations():
                out.append(Violation("control lattice", msg, i, t))
        if i < len(instance.noise.dists):
            seq = instance.noise.unit(i)
            if len(seq) != T:
                out.append(Violation("noise", f"{len(seq)} stage laws for horizon {T}", i))
            for t, dist in enumerate(seq):
                for msg in dist.violations():
                    field_ = "probability mass" if "mass" in msg else "noise"
                    out.append(Violation(field_, msg, i, t + 1))
        if i < len(instance.x0):
            if unit.states_at(0).index_of(instance.x0[i]) is None:
                out.append(Violation("initial state", "not a point of the stage-0 lattice", i))

    dims = tuple(u.coupling_dim for u in instance.units)
    if instance.coupling.dims != dims:
        out.append(Violation("coupling", f"column partition {instance.coupling.dims} "
                                         f"does not match unit outputs {dims}"))
    for t in range(T):
        a = instance.coupling.matrix(t)
        if a.shape[1] != sum(dims):
            out.append(Violation("coupling", f"A_t has {a.shape[1]} columns, "
                                             f"expected {sum(dims)}", stage=t))
        elif not _full_row_rank(a):
            out.append(Violation("coupling", "A_t is not full row rank", stage=t))

    if out:
        return out
    # contract checks that need evaluator output
    from .tabulate import tabulation_violations

    for i, unit in enumerate(instance.units):
        out.extend(tabulation_violations(unit, instance.noise.unit(i), T, index=i))
    return out


def _as_stages(candidate, coupling: CouplingSubspace) -> list[np.ndarray]:
    if isinstance(candidate, CoordinationProcess):
        candidate = candidate.values
    stages = [np.asarray(c, float).reshape(-1) for c in candidate]
    for t, c in enumerate(stages):
        if c.shape[0] != coupling.width:
            raise ModelError(f"stage {t}: vector of length {c.shape[0]}, "
                             f"coupling expects {coupling.width}")
    return stages


def project_price(candidate, coupling: CouplingSubspace) -> CoordinationProcess:
    """Orthogonal projection of per-stage vectors onto ``row-space(A_t)``."""
    stages = _as_stages(candidate, coupling)
    out = []
    for t, c in enumerate(stages):
        a = coupling.matrix(t)
        if a.shape[0] == 0:
            out.append(np.zeros_like(c))
            continue
        lam = np.linalg.solve(a @ a.T, a @ c)
        out.append(a.T @ lam)
    return CoordinationProcess(CoordinationKind.PRICE, out, coupling.dims)


def project_resource(candidate, coupling: CouplingSubspace) -> CoordinationProcess:
    """Orthogonal projection of per-stage vectors onto ``ker(A_t)``."""
    stages = _as_stages(candidate, coupling)
    out = []
    for t, c in enumerate(stages):
        a = coupling.matrix(t)
        if a.shape[0] == 0:
            out.append(c.copy())
            continue
        lam = np.linalg.solve(a @ a.T, a @ c)
        out.append(c - a.T @ lam)
    return CoordinationProcess(CoordinationKind.RESOURCE, out, coupling.dims)


def price_residual(process: CoordinationProcess, coupling: CouplingSubspace) -> float:
    """Largest distance of a stage vector to ``row-space(A_t)``."""
    proj = project_price(process.values, coupling)
    return max((float(np.max(np.abs(a - b), initial=0.0))
                for a, b in zip(process.values, proj.values)), default=0.0)


def resource_residual(process: CoordinationProcess, coupling: CouplingSubspace) -> float:
    return max((coupling.residual(t, v) for t, v in enumerate(process.values)), default=0.0)


def check_price(process: CoordinationProcess, instance: ProblemInstance):
    _check_shape(process, instance, CoordinationKind.PRICE)
    res = price_residual(process, instance.coupling)
    if res > MEMBERSHIP_TOL:
        raise InadmissibleError(f"price process is not in the dual cone (residual {res:.3g})")


def check_resource(process: CoordinationProcess, instance: ProblemInstance):
    _check_shape(process, instance, CoordinationKind.RESOURCE)
    res = resource_residual(process, instance.coupling)
    if res > MEMBERSHIP_TOL:
        raise InadmissibleError(f"resource process violates A_t r_t = 0 (residual {res:.3g})")


def _check_shape(process, instance, kind):
    if process.kind is not kind:
        raise ModelError(f"expected a {kind.value} process, got {process.kind.value}")
    if process.horizon != instance.horizon:
        raise ModelError(f"process has {process.horizon} stages, instance {instance.horizon}")
    if process.dims != instance.coupling.dims:
        raise ModelError("process layout does not match the coupling columns")


__all__ = [
    "CoordinationKind", "CoordinationProcess", "CouplingSubspace", "DiscreteDistribution",
    "InadmissibleError", "InformationStructure", "Lattice", "ModelError", "NoiseModel",
    "ProblemInstance", "TimeGrid", "UnitSpec", "Violation", "check_price", "check_resource",
    "project_price", "project_resource", "validate_instance",
]
