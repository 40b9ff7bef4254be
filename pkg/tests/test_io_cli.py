import json

import numpy as np
import pytest

from stochdecomp.cli import RunConfig, main, parse_reports, report_render, run, summary_text
from stochdecomp.io import (
    dump_instance,
    fingerprint,
    instance_from_dict,
    instance_to_dict,
    load_instance,
    resolve_instance,
    shipped_file,
)
from stochdecomp.microgrid import enumeration_instance, random_storage_instance
from stochdecomp.model import ModelError
from stochdecomp.oracle import global_dp


def test_instance_round_trip_keeps_fingerprint(tmp_path, micro3):
    path = tmp_path / "m3.json"
    dump_instance(micro3, path)
    back = load_instance(path)
    assert fingerprint(back) == fingerprint(micro3)
    assert back.name == micro3.name


@pytest.mark.parametrize("name", ["micro-2", "micro-3", "meso-6"])
def test_shipped_files_match_builders(name, request):
    built = request.getfixturevalue(name.replace("-", ""))
    loaded = instance_from_dict(json.loads(shipped_file(name).read_text()))
    assert fingerprint(loaded) == fingerprint(built)


def test_storage_instances_round_trip():
    for inst in (enumeration_instance(), random_storage_instance(np.random.default_rng(2), 3, 2)):
        back = instance_from_dict(json.loads(json.dumps(instance_to_dict(inst))))
        assert fingerprint(back) == fingerprint(inst)
        assert global_dp(back).value == global_dp(inst).value


def test_bad_instance_references(tmp_path):
    with pytest.raises(ModelError, match="does not exist"):
        resolve_instance(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ModelError, match="not valid JSON"):
        resolve_instance(str(bad))
    with pytest.raises(ModelError, match="unknown shipped instance"):
        resolve_instance("giga-9")


def test_empty_render_has_headers():
    text, machine = report_render([])
    assert machine == {"reports": []}
    assert "Bounds" in text and "Simulation" in text
    assert summary_text([]).splitlines()[0].split()[0] == "LB(price)"


def test_report_documents_round_trip(tmp_path):
    res = run(RunConfig("micro-2", pipelines=("price", "resource", "oracle", "simulate"),
                        max_iters=3, n=50, out=tmp_path))
    doc = json.loads((tmp_path / "reports.json").read_text())
    reps = parse_reports(doc)
    assert report_render(reps)[1]["reports"] == report_render(res.reports)[1]["reports"]
    assert doc["fingerprint"] == res.fingerprint


def test_run_rejects_bad_config():
    with pytest.raises(ModelError, match="unknown pipeline"):
        run(RunConfig("micro-2", pipelines=("dual",)))
    with pytest.raises(ModelError, match="at least 2"):
        run(RunConfig("micro-2", pipelines=("simulate",), n=1))


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "micro-2", "--pipeline", "price", "--max-iters", "2"]) == 0
    assert "LB(price)" in capsys.readouterr().out
    assert main(["run", "meso-6", "--pipeline", "oracle"]) == 3
    assert "budget" in capsys.readouterr().err
    assert main(["run", "--instance", "micro-2", "--pipeline", "bogus"]) == 3


def test_cli_outputs_are_deterministic(tmp_path):
    args = ["run", "micro-2", "--pipeline", "price,resource,simulate", "--max-iters", "4",
            "--n", "40", "--seed", "5", "--trajectories"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "3"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "trajectories_decentralized.csv" in names
    for name in names:
        if name.startswith("timing"):
            continue
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_render_and_export_commands(tmp_path, capsys):
    run(RunConfig("micro-2", pipelines=("price",), max_iters=2, out=tmp_path / "r"))
    assert main(["render", str(tmp_path / "r" / "reports.json")]) == 0
    out = capsys.readouterr().out
    assert "Bounds" in out and "LB(price)" in out
    assert main(["export", str(tmp_path / "x")]) == 0
    assert sorted(p.name for p in (tmp_path / "x").iterdir()) == [
        "meso-6.json", "micro-2.json", "micro-3.json"]


def test_bounds_table_brackets_oracle(tmp_path):
    res = run(RunConfig("micro-2", pipelines=("oracle", "price", "resource"), out=tmp_path))
    oracle, lb, ub = res.reports
    assert lb.value <= oracle.value + 1e-9 <= ub.value + 2e-9
    rows = json.loads((tmp_path / "bounds.json").read_text())
    assert [r["method"] for r in rows] == ["oracle", "LB(price)", "UB(resource)"]
