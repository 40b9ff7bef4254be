"""Decomposed bounds and their improvement over deterministic coordination.

``lower_bound`` sums local price value functions at the initial state,
``upper_bound`` sums local resource value functions.  The outer loops
improve them: projected supergradient ascent over prices (the supergradient
is the expected coupling output under the price-optimal feedbacks) and
projected descent over resources (central finite differences along a
kernel basis, iterates snapped to the attainable coupling grid).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import enumerate_admissible, nearest_admissible
from .localdp import solve_batch, solve_price_dp, solve_resource_dp
from .model import (
    CoordinationKind,
    CoordinationProcess,
    ModelError,
    ProblemInstance,
    check_price,
    check_resource,
    project_price,
    project_resource,
)

log = logging.getLogger(__name__)

ATTAIN_TOL = 1e-9


class InfeasibleError(ModelError):
    """No finite upper bound is available from the requested start."""


@dataclass
class TraceRow:
    iteration: int
    bound: float
    grad_norm: float
    step: float

    def to_dict(self):
        return {"iter": self.iteration, "bound": self.bound,
                "grad_norm": self.grad_norm, "step": self.step}


@dataclass
class BoundReport:
    """A decomposed bound with the coordination process that produced it.

    ``value`` is the sum of the per-unit values at the initial state.  The
    value and feedback tables are kept by reference and are not serialized.
    """

    kind: str
    value: float
    process: CoordinationProcess
    per_unit: tuple
    trace: list = field(default_factory=list)
    flags: tuple = ()
    status: str = "evaluated"
    tables: tuple = field(default=(), repr=False)
    feedbacks: tuple = field(default=(), repr=False)

    @property
    def iterations(self) -> int:
        return max(len(self.trace), 1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "value": _num(self.value),
            "per_unit": [_num(v) for v in self.per_unit],
            "process": self.process.to_dict(),
            "trace": [row.to_dict() for row in self.trace],
            "flags": list(self.flags),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d) -> "BoundReport":
        return cls(
            kind=d["kind"],
            value=_unnum(d["value"]),
            process=CoordinationProcess.from_dict(d["process"]),
            per_unit=tuple(_unnum(v) for v in d["per_unit"]),
            trace=[TraceRow(r["iter"], _unnum(r["bound"]), _unnum(r["grad_norm"]), r["step"])
                   for r in d["trace"]],
            flags=tuple(d["flags"]),
            status=d["status"],
        )


def _num(v):
    v = float(v)
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _unnum(v):
    return float(v)


def _x0_values(instance: ProblemInstance, tables) -> tuple:
    return tuple(float(tables[i].values[0][instance.x0_index(i)]) for i in range(instance.n_units))


def _total(parts) -> float:
    total = 0.0
    for v in parts:
        total = total + v
    return total


def lower_bound(instance: ProblemInstance, price: CoordinationProcess,
                workers: int = 1) -> BoundReport:
    """Sum of local price value functions at ``x0``; ``price`` must lie in S*."""
    check_price(price, instance)
    jobs = [(solve_price_dp, (tab, price.unit(i)), {}) for i, tab in enumerate(instance.tabulation)]
    out = solve_batch(jobs, workers)
    tables = tuple(v for v, _ in out)
    per_unit = _x0_values(instance, tables)
    return BoundReport("lower", _total(per_unit), price, per_unit,
                       flags=("global feasibility unknown",),
                       tables=tables, feedbacks=tuple(f for _, f in out))


def upper_bound(instance: ProblemInstance, resource: CoordinationProcess,
                workers: int = 1) -> BoundReport:
    """Sum of local resource value functions at ``x0``; +inf is a legal (vacuous) bound."""
    check_resource(resource, instance)
    jobs = [(solve_resource_dp, (tab, resource.unit(i)), {})
            for i, tab in enumerate(instance.tabulation)]
    out = solve_batch(jobs, workers)
    tables = tuple(v for v, _ in out)
    per_unit = _x0_values(instance, tables)
    flags = () if np.isfinite(_total(per_unit)) else ("infeasible resource",)
    return BoundReport("upper", _total(per_unit), resource, per_unit, flags=flags,
                       tables=tables, feedbacks=tuple(f for _, f in out))


def expected_coupling(instance: ProblemInstance, feedbacks) -> list[np.ndarray]:
    """``E[Theta_t(X_t, U_t)]`` per stage (concatenated) under the given feedbacks.

    The state distribution starts as a point mass at ``x0`` and is pushed
    through the tabulated kernels, so mass splits over cell corners with
    the interpolation weights.
    """
    T = instance.horizon
    per_stage = [[None] * instance.n_units for _ in range(T)]
    for i, tab in enumerate(instance.tabulation):
        mu = np.zeros(tab.lattices[0].size)
        mu[instance.x0_index(i)] = 1.0
        for t in range(T):
            st = tab.stages[t]
            fb = feedbacks[i].indices[t]
            live = np.flatnonzero(mu > 0)
            if np.any(fb[live] < 0):
                raise InfeasibleError(f"unit {i} reaches a state without feasible control at t={t}")
            w = mu[live]
            per_stage[t][i] = w @ st.theta[live, fb[live]]
            rows = live * st.n_controls + fb[live]
            mu = st.trans[rows].T @ w
    return [np.concatenate(row) if row else np.zeros(0) for row in per_stage]


def price_gradient(instance: ProblemInstance, price: CoordinationProcess,
                   report: BoundReport) -> list[np.ndarray]:
    """Supergradient of ``p -> lower_bound(p)`` at ``price`` (full space, not projected)."""
    if report.kind != "lower" or not report.process.same_as(price):
        raise ModelError("report was not produced by lower_bound at this price")
    if not np.isfinite(report.value):
        raise InfeasibleError("lower bound is +inf; no supergradient")
    return expected_coupling(instance, report.feedbacks)


class _ResourceOracle:
    """Memoized per-unit resource values at ``x0`` keyed by the unit's resource bytes."""

    def __init__(self, instance: ProblemInstance):
        self.instance = instance
        self.cache: dict = {}

    def unit_value(self, i: int, stages) -> float:
        key = (i, b"".join(np.round(np.asarray(s, float), 12).tobytes() for s in stages))
        v = self.cache.get(key)
        if v is None:
            tables, _ = solve_resource_dp(self.instance.tabulation[i], stages)
            v = float(tables.values[0][self.instance.x0_index(i)])
            self.cache[key] = v
        return v

    def value(self, process: CoordinationProcess) -> float:
        return _total(self.unit_value(i, process.unit(i)) for i in range(self.instance.n_units))


@dataclass
class ResourceGradient:
    vector: list
    one_sided: list
    missing: list
    available: bool


def _grid_step(r_t, b, grids, offsets, sign) -> float | None:
    """Smallest ``s > 0`` such that ``r_t + sign * s * b`` stays on every unit grid."""
    moved = np.flatnonzero(np.abs(b) > 0)
    cands = set()
    for c in moved:
        i = int(np.searchsorted(offsets, c, side="right") - 1)
        vals = np.unique(grids[i][:, c - offsets[i]])
        s = (vals - r_t[c]) / (sign * b[c])
        cands.update(np.round(s[s > ATTAIN_TOL], 12).tolist())
    touched = sorted({int(np.searchsorted(offsets, c, side="right") - 1) for c in moved})
    for s in sorted(cands):
        y = r_t + sign * s * b
        if all(_on_grid(y[offsets[i]:offsets[i + 1]], grids[i]) for i in touched):
            return s
    return None


def _on_grid(v, grid) -> bool:
    return bool(np.any(np.all(np.abs(grid - v) <= ATTAIN_TOL, axis=1)))


def resource_gradient(instance: ProblemInstance, resource: CoordinationProcess,
                      report: BoundReport | None = None, oracle=None) -> ResourceGradient:
    """Finite-difference gradient of the upper bound inside ``ker(A_t)``.

    Each kernel basis direction is probed one attainable grid step on each
    side; central differences where both sides are finite, one-sided where
    only one is.  ``available`` is False when no probe is finite.
    """
    oracle = oracle or _ResourceOracle(instance)
    coupling = instance.coupling
    offsets = coupling.offsets
    f0 = report.value if report is not None else oracle.value(resource)
    if not np.isfinite(f0):
        raise InfeasibleError("upper bound is +inf at the current resource")
    grads, one_sided, missing = [], [], []
    any_probe = False
    n_dirs = 0
    for t in range(instance.horizon):
        basis = coupling.kernel_basis(t)
        grids = [tab.theta_grids[t] for tab in instance.tabulation]
        r_t = resource.values[t]
        d = np.zeros(basis.shape[1])
        for j in range(basis.shape[1]):
            n_dirs += 1
            b = basis[:, j]
            probes = {}
            for sign in (1, -1):
                s = _grid_step(r_t, b, grids, offsets, sign)
                if s is None:
                    continue
                vals = list(resource.values)
                vals[t] = r_t + sign * s * b
                f = oracle.value(CoordinationProcess(CoordinationKind.RESOURCE, vals, resource.dims))
                if np.isfinite(f):
                    probes[sign] = (s, f)
            if 1 in probes and -1 in probes:
                (sp, fp), (sm, fm) = probes[1], probes[-1]
                d[j] = (fp - fm) / (sp + sm)
                any_probe = True
            elif probes:
                sign, (s, f) = next(iter(probes.items()))
                d[j] = sign * (f - f0) / s
                one_sided.append((t, j))
                any_probe = True
            else:
                missing.append((t, j))
        if basis.shape[1]:
            grads.append(basis @ np.linalg.solve(basis.T @ basis, d))
        else:
            grads.append(np.zeros(coupling.width))
    available = any_probe or n_dirs == 0
    return ResourceGradient(grads, one_sided, missing, available)


@dataclass
class OuterOptions:
    """Settings of the outer ascent/descent loops.

    ``step0`` is the initial largest coordinate move of an iterate.
    ``direction`` maps the (projected) gradient and the iteration history
    to a search direction; the default is the gradient itself.
    """

    max_iters: int = 50
    step0: float = 1.0
    tol: float = 1e-6
    patience: int = 5
    backtrack: float = 0.5
    expand: float = 2.0
    max_backtracks: int = 10
    direction: Callable | None = None


def _stage_norm(vectors) -> float:
    return max((float(np.max(np.abs(v), initial=0.0)) for v in vectors), default=0.0)


def maximize_lower_bound(instance: ProblemInstance, p_init: CoordinationProcess | None = None,
                         options: OuterOptions | None = None, workers: int = 1) -> BoundReport:
    """Projected supergradient ascent on the price lower bound.

    Only strict improvements are accepted, so the reported trace (best
    value so far) never decreases.  Stops on ``max_iters``, on a small
    projected gradient, when backtracking finds no improvement, or after
    ``patience`` accepted steps with relative gain below ``tol``.
    """
    opts = options or OuterOptions()
    coupling = instance.coupling
    if p_init is None:
        p_init = CoordinationProcess.zeros(CoordinationKind.PRICE, instance.horizon, coupling.dims)
    p = project_price(p_init.values, coupling)
    best = lower_bound(instance, p, workers)
    if not np.isfinite(best.value):
        best.status = "infinite bound"
        best.trace = [TraceRow(0, best.value, float("nan"), 0.0)]
        return best
    grad = project_price(price_gradient(instance, p, best), coupling).values
    trace = [TraceRow(0, best.value, _stage_norm(grad), 0.0)]
    step = opts.step0
    stall = 0
    status = "max_iters"
    history = []
    for it in range(1, opts.max_iters):
        gnorm = _stage_norm(grad)
        if gnorm < opts.tol:
            status = "small gradient"
            break
        direction = grad if opts.direction is None else opts.direction(grad, history)
        dnorm = _stage_norm(direction) or 1.0
        accepted = None
        for _ in range(opts.max_backtracks + 1):
            cand = project_price([pv + step * dv / dnorm for pv, dv in zip(p.values, direction)],
                                 coupling)
            rep = lower_bound(instance, cand, workers)
            if rep.value > best.value:
                accepted = rep
                break
            step *= opts.backtrack
        if accepted is None:
            status = "no ascent step"
            break
        gain = (accepted.value - best.value) / max(1.0, abs(best.value))
        history.append((p, grad))
        p, best = accepted.process, accepted
        grad = project_price(price_gradient(instance, p, best), coupling).values
        trace.append(TraceRow(it, best.value, _stage_norm(grad), step))
        log.debug("price iter %d: bound %.6g step %.3g", it, best.value, step)
        stall = stall + 1 if gain < opts.tol else 0
        if stall >= opts.patience:
            status = "stalled"
            break
        step *= opts.expand
    best.trace = trace
    best.status = status
    return best


def _snap(instance: ProblemInstance, stages) -> CoordinationProcess | None:
    """Nearest attainable admissible grid point, stage by stage."""
    out = []
    a_grids = [tab.theta_grids for tab in instance.tabulation]
    for t, target in enumerate(stages):
        grids = [g[t] for g in a_grids]
        hit = nearest_admissible(grids, target, instance.coupling.matrix(t))
        if hit is None:
            return None
        _, choice = hit
        out.append(np.concatenate([grids[i][k] for i, k in enumerate(choice)])
                   if choice else np.zeros(0))
    return CoordinationProcess(CoordinationKind.RESOURCE, out, instance.coupling.dims)


def snap_resource(instance: ProblemInstance, candidate) -> CoordinationProcess | None:
    """Project per-stage vectors onto ``ker(A_t)`` and snap to the attainable grid."""
    proj = project_resource(candidate, instance.coupling)
    return _snap(instance, proj.values)


def minimize_upper_bound(instance: ProblemInstance, r_init: CoordinationProcess,
                         options: OuterOptions | None = None, workers: int = 1) -> BoundReport:
    """Projected finite-difference descent on the resource upper bound."""
    opts = options or OuterOptions()
    check_resource(r_init, instance)
    best = upper_bound(instance, r_init, workers)
    if not np.isfinite(best.value):
        raise InfeasibleError("upper bound is +inf at r_init; start from suggest_resource(instance)")
    oracle = _ResourceOracle(instance)
    r = r_init
    gr = resource_gradient(instance, r, best, oracle)
    trace = [TraceRow(0, best.value, _stage_norm(gr.vector), 0.0)]
    step = opts.step0
    stall = 0
    status = "max_iters"
    history = []
    for it in range(1, opts.max_iters):
        if not gr.available:
            status = "gradient unavailable"
            break
        gnorm = _stage_norm(gr.vector)
        if gnorm < opts.tol:
            status = "small gradient"
            break
        direction = gr.vector if opts.direction is None else opts.direction(gr.vector, history)
        dnorm = _stage_norm(direction) or 1.0
        accepted = None
        for _ in range(opts.max_backtracks + 1):
            cand = snap_resource(instance, [rv - step * dv / dnorm
                                            for rv, dv in zip(r.values, direction)])
            if cand is None or cand.same_as(r):
                if step * opts.backtrack < ATTAIN_TOL:
                    break
                step *= opts.backtrack
                continue
            value = oracle.value(cand)
            if value < best.value:
                accepted = cand
                break
            step *= opts.backtrack
        if accepted is None:
            status = "no descent step"
            break
        prev = best.value
        history.append((r, gr.vector))
        r = accepted
        best = upper_bound(instance, r, workers)
        gain = (prev - best.value) / max(1.0, abs(prev))
        gr = resource_gradient(instance, r, best, oracle)
        trace.append(TraceRow(it, best.value, _stage_norm(gr.vector), step))
        log.debug("resource iter %d: bound %.6g step %.3g", it, best.value, step)
        stall = stall + 1 if gain < opts.tol else 0
        if stall >= opts.patience:
            status = "stalled"
            break
        step *= opts.expand
    best.trace = trace
    best.status = status
    return best


def suggest_resource(instance: ProblemInstance, workers: int = 1) -> CoordinationProcess:
    """Feasible starting resource from the unpenalized expected coupling outputs.

    Candidates are the expected outputs under the zero-price feedbacks,
    scaled by 1, 1/2, 1/4 and 0, each projected onto ``ker(A_t)`` and
    snapped to the attainable grid; the first with a finite upper bound wins.
    """
    zero = CoordinationProcess.zeros(CoordinationKind.PRICE, instance.horizon,
                                     instance.coupling.dims)
    rep = lower_bound(instance, zero, workers)
    if not np.isfinite(rep.value):
        raise InfeasibleError("a unit is infeasible on its own; no resource can be feasible")
    mean_theta = expected_coupling(instance, rep.feedbacks)
    tried = []
    for scale in (1.0, 0.5, 0.25, 0.0):
        cand = snap_resource(instance, [scale * v for v in mean_theta])
        if cand is None or any(cand.same_as(c) for c in tried):
            continue
        tried.append(cand)
        if np.isfinite(upper_bound(instance, cand, workers).value):
            return cand
    raise InfeasibleError(f"no feasible resource process among {len(tried)} grid candidates")


def admissible_resource_grid(instance: ProblemInstance, t: int, limit: int | None = 100_000):
    """All attainable admissible stage-t resource vectors, one per row."""
    grids = [tab.theta_grids[t] for tab in instance.tabulation]
    combos = enumerate_admissible(grids, instance.coupling.matrix(t), limit=limit)
    rows = [np.concatenate([grids[i][k] for i, k in enumerate(c)]) for c in combos]
    return np.array(rows).reshape(len(rows), instance.coupling.width)
