"""Instance files and report serialization.

Instances are JSON documents with sections ``time``, ``units`` (each a
registered parametric kind plus parameters), ``noise`` (support lists per
unit and stage), ``coupling``, ``x0`` and ``information``.  Floats are
written with ``repr`` precision, so a file round trip is exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .model import (
    CouplingSubspace,
    DiscreteDistribution,
    InformationStructure,
    ModelError,
    NoiseModel,
    ProblemInstance,
    TimeGrid,
    as_rows,
)

FORMAT = "stochdecomp-instance"
VERSION = 1


def _clean(obj):
    """JSON-ready copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def _coupling_to_dict(coupling: CouplingSubspace, horizon: int) -> dict:
    mats = coupling.matrices
    if isinstance(mats, np.ndarray):
        if mats.size and np.all(np.isin(mats, (0.0, 1.0))):
            groups = []
            for row in mats:
                cols = np.flatnonzero(row)
                groups.append([_locate(coupling, int(c)) for c in cols])
            return {"dims": list(coupling.dims), "sum_to_zero": groups}
        return {"dims": list(coupling.dims), "matrix": mats.tolist()}
    return {"dims": list(coupling.dims), "stages": [np.asarray(m).tolist() for m in mats]}


def _locate(coupling, col):
    unit = int(np.searchsorted(coupling.offsets, col, side="right") - 1)
    return [unit, col - int(coupling.offsets[unit])]


def _coupling_from_dict(d) -> CouplingSubspace:
    dims = d["dims"]
    if "sum_to_zero" in d:
        return CouplingSubspace.sum_to_zero([[tuple(p) for p in g] for g in d["sum_to_zero"]], dims)
    if "matrix" in d:
        rows = d["matrix"]
        return CouplingSubspace(as_rows(rows, sum(dims)), dims)
    if "stages" in d:
        return CouplingSubspace(tuple(as_rows(m, sum(dims))
                                      for m in d["stages"]), dims)
    raise ModelError("coupling section needs one of sum_to_zero, matrix or stages")


def instance_to_dict(instance: ProblemInstance) -> dict:
    units = []
    for i, u in enumerate(instance.units):
        if u.kind is None:
            raise ModelError(f"unit {i} ({u.name}) has no registered kind and cannot be written")
        units.append({"name": u.name, "kind": u.kind, "params": u.params})
    noise = [[{"values": d.values.tolist(), "probs": d.probs.tolist()} for d in seq]
             for seq in instance.noise.dists]
    return _clean({
        "format": FORMAT,
        "version": VERSION,
        "name": instance.name,
        "time": {"horizon": instance.horizon, "step_label": instance.time.step_label},
        "units": units,
        "noise": noise,
        "coupling": _coupling_to_dict(instance.coupling, instance.horizon),
        "x0": [x.tolist() for x in instance.x0],
        "information": instance.information.value,
    })


def instance_from_dict(d) -> ProblemInstance:
    from .microgrid import unit_from_params

    if d.get("format") != FORMAT:
        raise ModelError(f"not an instance document (format {d.get('format')!r})")
    if int(d.get("version", 0)) != VERSION:
        raise ModelError(f"unsupported instance version {d.get('version')!r}")
    time = TimeGrid(int(d["time"]["horizon"]), d["time"].get("step_label", ""))
    units = [unit_from_params(u["kind"], u["name"], u["params"]) for u in d["units"]]
    noise = NoiseModel([[DiscreteDistribution(np.array(s["values"], float), s["probs"])
                         for s in seq] for seq in d["noise"]])
    return ProblemInstance(
        time, units, noise, _coupling_from_dict(d["coupling"]),
        [np.array(x, float) for x in d["x0"]],
        InformationStructure(d.get("information", "centralized")),
        d.get("name", ""),
    )


def dump_instance(instance: ProblemInstance, path) -> None:
    Path(path).write_text(dumps(instance_to_dict(instance)))


def load_instance(path) -> ProblemInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from None
    return instance_from_dict(doc)


def shipped_file(name: str):
    """Path-like handle of a shipped instance file."""
    return resources.files("stochdecomp").joinpath("data", f"v{VERSION}", f"{name}.json")


def export_shipped(directory) -> list[Path]:
    """Write every shipped microgrid instance to ``directory``."""
    from .microgrid import shipped_instances

    out = []
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, inst in shipped_instances().items():
        path = directory / f"{name}.json"
        dump_instance(inst, path)
        out.append(path)
    return out


def resolve_instance(ref: str) -> ProblemInstance:
    """Instance from a file path or a shipped name."""
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise ModelError(f"instance file {ref} does not exist")
        return load_instance(path)
    handle = shipped_file(ref)
    if handle.is_file():
        return instance_from_dict(json.loads(handle.read_text()))
    from .microgrid import shipped_instance

    return shipped_instance(ref)


def fingerprint(instance: ProblemInstance) -> str:
    """SHA-256 over the tabulated arrays, noise, coupling and initial state."""
    h = hashlib.sha256()

    def put(a):
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())

    put(np.array([instance.horizon, instance.n_units]))
    for tab in instance.tabulation:
        for st in tab.stages:
            put(st.states), put(st.controls), put(st.exp_cost), put(st.theta)
            put(st.trans.indptr), put(st.trans.indices), put(st.trans.data)
        put(tab.final)
    for t in range(instance.horizon):
        put(np.asarray(instance.coupling.matrix(t), float))
    for x in instance.x0:
        put(np.asarray(x, float))
    h.update(instance.information.value.encode())
    return h.hexdigest()
