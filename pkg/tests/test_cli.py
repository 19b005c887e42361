import json

import numpy as np

from feddd.allocation import AllocInstance
from feddd.cli import main
from feddd.metrics import CSV_COLUMNS


def test_run_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_clients": 4, "hidden": [6, 4], "dataset": {"per_class": 30, "test_per_class": 10, "dim": 5}}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--scheme", "fedcs", "--seed", "3", "--rounds", "3", "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["rounds"] == 3
    assert (out / "rounds.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["config"]["scheme"] == "fedcs"


def test_solve_and_oracle(tmp_path, capsys):
    inst = AllocInstance([3.0, 2.0, 4.0], [1.0, 2.0, 1.5], [1.0, 2.0, 1.0], [0.1, 0.2, 0.3], 0.1, 0.6, 0.8)
    path = tmp_path / "inst.json"
    path.write_text(inst.to_json())
    assert main(["solve", "--instance", str(path)]) == 0
    solved = json.loads(capsys.readouterr().out)
    assert main(["oracle", "--instance", str(path), "--grid-step", "0.01"]) == 0
    oracle = json.loads(capsys.readouterr().out)
    assert np.isclose(solved["objective"], oracle["vertex"]["objective"], rtol=1e-9)
    assert oracle["grid"]["objective"] >= solved["objective"] * (1 - 1e-9)


def test_error_is_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(AllocInstance([1.0], [1.0], [1.0], [0.0], 0.0, 0.6, 0.3).to_json())
    assert main(["solve", "--instance", str(path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InfeasibleAllocationError" and "D_max" in err["message"]


def test_missing_file_is_json(tmp_path, capsys):
    assert main(["solve", "--instance", str(tmp_path / "nope.json")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"
