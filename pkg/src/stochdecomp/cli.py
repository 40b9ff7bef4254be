"""Command-line pipelines: bounds, oracle and policy simulation on one instance.

::

    python -m stochdecomp run micro-2 --pipeline oracle,price,resource
    python -m stochdecomp run micro-3 --pipeline simulate --policy resource --n 1000 --seed 7
    python -m stochdecomp render out/reports.json

Every output file except ``timing.*`` is a deterministic function of the
configuration (worker count included or not).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .coordination import (
    BoundReport,
    OuterOptions,
    maximize_lower_bound,
    minimize_upper_bound,
    suggest_resource,
)
from .io import dumps, fingerprint, resolve_instance
from .model import ModelError, validate_instance
from .oracle import OracleReport, global_dp
from .policy import PolicyKind, PolicySpec, SimulationReport, simulate_policy

log = logging.getLogger("stochdecomp")

PIPELINES = ("price", "resource", "oracle", "simulate")
POLICIES = tuple(k.value for k in PolicyKind)
EXIT_REJECTED = 3


@dataclass
class RunConfig:
    instance: str
    pipelines: tuple = ("price", "resource")
    max_iters: int = 50
    tol: float = 1e-6
    step0: float = 1.0
    n: int = 1000
    seed: int = 0
    policies: tuple = POLICIES
    out: Path | None = None
    workers: int = 1
    trajectories: bool = False

    def violations(self) -> list[str]:
        out = []
        bad = [p for p in self.pipelines if p not in PIPELINES]
        if bad:
            out.append(f"unknown pipeline(s) {bad}; choose from {list(PIPELINES)}")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            out.append(f"unknown policy kind(s) {bad}; choose from {list(POLICIES)}")
        if "simulate" in self.pipelines and self.n < 2:
            out.append("--n must be at least 2 for simulation")
        if self.max_iters < 1 or self.tol <= 0 or self.step0 <= 0:
            out.append("outer-loop options must be positive")
        if self.workers < 1:
            out.append("--workers must be at least 1")
        return out


@dataclass
class RunResult:
    reports: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    fingerprint: str = ""
    instance: str = ""


def run(config: RunConfig) -> RunResult:
    """Execute the selected pipelines and, when ``config.out`` is set, write report files."""
    problems = config.violations()
    if problems:
        raise ModelError("; ".join(problems))
    inst = resolve_instance(config.instance)
    bad = validate_instance(inst)
    if bad:
        raise ModelError("invalid instance: " + "; ".join(str(v) for v in bad))
    result = RunResult(fingerprint=fingerprint(inst), instance=inst.name or config.instance)
    opts = OuterOptions(max_iters=config.max_iters, step0=config.step0, tol=config.tol)
    sims = config.policies if "simulate" in config.pipelines else ()
    need_price = "price" in config.pipelines or PolicyKind.PRICE.value in sims
    need_res = "resource" in config.pipelines or any(
        p in sims for p in (PolicyKind.RESOURCE.value, PolicyKind.DECENTRALIZED.value))

    if "oracle" in config.pipelines:
        t0 = time.perf_counter()
        rep = OracleReport(global_dp(inst).value)
        result.timing["oracle"] = time.perf_counter() - t0
        result.reports.append(rep)
        log.info("oracle value %.6g", rep.value)
    lb = ub = None
    if need_price:
        t0 = time.perf_counter()
        lb = maximize_lower_bound(inst, options=opts, workers=config.workers)
        result.timing["price"] = time.perf_counter() - t0
        result.reports.append(lb)
        log.info("price lower bound %.6g (%s)", lb.value, lb.status)
    if need_res:
        t0 = time.perf_counter()
        ub = minimize_upper_bound(inst, suggest_resource(inst, config.workers), opts,
                                  workers=config.workers)
        result.timing["resource"] = time.perf_counter() - t0
        result.reports.append(ub)
        log.info("resource upper bound %.6g (%s)", ub.value, ub.status)
    trajectories = {}
    for kind in sims:
        source = lb if kind == PolicyKind.PRICE.value else ub
        spec = PolicySpec.from_report(source, inst, kind)
        t0 = time.perf_counter()
        sim = simulate_policy(spec, config.n, config.seed, workers=config.workers,
                              record=config.trajectories)
        result.timing[f"simulate {kind}"] = time.perf_counter() - t0
        result.reports.append(sim)
        if config.trajectories:
            trajectories[kind] = sim.trajectory_csv()
        log.info("%s policy mean %.6g +- %.3g", kind, sim.mean, sim.halfwidth)
    if config.out is not None:
        write_outputs(Path(config.out), result, trajectories)
    return result


# -- rendering ---------------------------------------------------------------------

def _fmt(v) -> str:
    v = float(v)
    return f"{v:.6f}" if abs(v) != float("inf") else ("+inf" if v > 0 else "-inf")


def _bound_rows(reports):
    rows = []
    for r in reports:
        if isinstance(r, BoundReport):
            method = "LB(price)" if r.kind == "lower" else "UB(resource)"
            rows.append({"method": method, "bound": r.value, "iterations": r.iterations,
                         "status": r.status})
        elif isinstance(r, OracleReport):
            rows.append({"method": "oracle", "bound": r.value, "iterations": 1,
                         "status": "exact"})
    return rows


def _sim_rows(reports):
    return [{"policy": r.policy, "mean": r.mean, "halfwidth": r.halfwidth, "n": r.n,
             "seed": r.seed, "residual": r.residual}
            for r in reports if isinstance(r, SimulationReport)]


def _table(header, rows) -> str:
    cells = [header] + rows
    widths = [max(len(str(row[k])) for row in cells) for k in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def bounds_text(reports) -> str:
    rows = [[r["method"], _fmt(r["bound"]), str(r["iterations"]), r["status"]]
            for r in _bound_rows(reports)]
    return _table(["method", "bound", "iterations", "status"], rows)


def simulation_text(reports) -> str:
    rows = [[r["policy"], _fmt(r["mean"]), _fmt(r["halfwidth"]), str(r["n"])]
            for r in _sim_rows(reports)]
    return _table(["policy", "mean", "95% halfwidth", "n"], rows)


SUMMARY_COLUMNS = ("LB(price)", "oracle", "UB(resource)", "sim(price policy)",
                   "sim(resource policy)", "sim(decentralized)")


def summary_text(reports) -> str:
    """One row in the layout of the bounds/simulation comparison; missing entries are '-'."""
    vals = {c: "-" for c in SUMMARY_COLUMNS}
    for r in _bound_rows(reports):
        vals[r["method"]] = _fmt(r["bound"])
    names = {"price": "sim(price policy)", "resource": "sim(resource policy)",
             "decentralized": "sim(decentralized)"}
    for r in _sim_rows(reports):
        vals[names[r["policy"]]] = f"{_fmt(r['mean'])} +- {_fmt(r['halfwidth'])}"
    return _table(list(SUMMARY_COLUMNS), [[vals[c] for c in SUMMARY_COLUMNS]])


def report_render(reports) -> tuple[str, dict]:
    """Human-readable text and the machine-readable document of a report list."""
    text = "Bounds\n" + bounds_text(reports) + "\nSimulation\n" + simulation_text(reports)
    machine = {"reports": [_tagged(r) for r in reports]}
    return text, machine


def _tagged(r) -> dict:
    if isinstance(r, BoundReport):
        return {"type": "bound", **r.to_dict()}
    if isinstance(r, SimulationReport):
        return {"type": "simulation", **r.to_dict()}
    if isinstance(r, OracleReport):
        return {"type": "oracle", **r.to_dict()}
    raise TypeError(f"cannot render {type(r).__name__}")


def parse_reports(machine: dict) -> list:
    """Inverse of the machine half of :func:`report_render`."""
    out = []
    for d in machine.get("reports", []):
        kind = d.get("type")
        body = {k: v for k, v in d.items() if k != "type"}
        if kind == "bound":
            out.append(BoundReport.from_dict(body))
        elif kind == "simulation":
            out.append(SimulationReport.from_dict(body))
        elif kind == "oracle":
            out.append(OracleReport.from_dict(body))
        else:
            raise ModelError(f"unknown report type {kind!r}")
    return out


def write_outputs(out: Path, result: RunResult, trajectories=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    reps = result.reports
    text, machine = report_render(reps)
    machine = {"instance": result.instance, "fingerprint": result.fingerprint, **machine}
    (out / "bounds.txt").write_text(bounds_text(reps))
    (out / "bounds.json").write_text(dumps(_bound_rows(reps)))
    (out / "simulation.txt").write_text(simulation_text(reps))
    (out / "simulation.json").write_text(dumps(_sim_rows(reps)))
    (out / "summary.txt").write_text(summary_text(reps))
    (out / "reports.json").write_text(dumps(machine))
    (out / "timing.json").write_text(dumps(result.timing))
    (out / "timing.txt").write_text(_table(["step", "wall time (s)"],
                                           [[k, f"{v:.3f}"] for k, v in result.timing.items()]))
    for kind, csv in (trajectories or {}).items():
        (out / f"trajectories_{kind}.csv").write_text(csv)


# -- entry point ---------------------------------------------------------------------

def _split(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochdecomp",
                                 description="Decomposed bounds and policies for coupled units.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run bound, oracle and simulation pipelines")
    r.add_argument("instance_pos", nargs="?", metavar="INSTANCE",
                   help="shipped name (micro-2, micro-3, meso-6) or instance file")
    r.add_argument("--instance", help="same as INSTANCE")
    r.add_argument("--pipeline", default="price,resource",
                   help="comma list of price, resource, oracle, simulate")
    r.add_argument("--policy", default=",".join(POLICIES),
                   help="policies to simulate: price, resource, decentralized")
    r.add_argument("--max-iters", type=int, default=50)
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--step0", type=float, default=1.0)
    r.add_argument("--n", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", type=Path, default=None)
    r.add_argument("--trajectories", action="store_true",
                   help="also dump per-scenario trajectories as CSV")
    r.add_argument("-v", "--verbose", action="store_true")
    v = sub.add_parser("render", help="print the tables of a reports.json file")
    v.add_argument("reports", type=Path)
    e = sub.add_parser("export", help="write the shipped instances as files")
    e.add_argument("directory", type=Path)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "render":
        reps = parse_reports(json.loads(args.reports.read_text()))
        print(report_render(reps)[0], end="")
        print("\n" + summary_text(reps), end="")
        return 0
    if args.command == "export":
        from .io import export_shipped

        for path in export_shipped(args.directory):
            print(path)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    ref = args.instance or args.instance_pos
    if ref is None:
        ap.error("an instance is required (positional or --instance)")
    cfg = RunConfig(instance=ref, pipelines=_split(args.pipeline), max_iters=args.max_iters,
                    tol=args.tol, step0=args.step0, n=args.n, seed=args.seed,
                    policies=_split(args.policy), out=args.out, workers=args.workers,
                    trajectories=args.trajectories)
    try:
        result = run(cfg)
    except ModelError as exc:
        print(f"stochdecomp: rejected: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    print(summary_text(result.reports), end="")
    return 0
