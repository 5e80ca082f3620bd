import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from nestedot.cli import EX_NOINPUT, EX_OK, EX_USAGE, EX_VALIDATION, run
from nestedot.convexity import FunctionalTable, table_to_dict
from nestedot.measures import DiscreteMeasure, NestedMeasure, ProcessNode, ProcessTree, dirac_tower, save


@pytest.fixture
def files(tmp_path):
    d = DiscreteMeasure.dirac
    paths = {}

    def put(name, obj):
        p = tmp_path / name
        save(obj, p)
        paths[name] = str(p)

    put("mu.json", DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5]))
    put("nu.json", DiscreteMeasure([[2.0], [4.0]], [0.5, 0.5]))
    put("P.json", NestedMeasure([0.5, 0.5], (d([0.0]), d([1.0]))))
    put("Q.json", NestedMeasure([0.5, 0.5], (d([0.0]), d([2.0]))))
    N_ = ProcessNode
    put("A.json", ProcessTree([1.0], (N_([0.0], [0.5, 0.5], (N_([1.0]), N_([-1.0]))),)))
    put("B.json", ProcessTree([0.5, 0.5], (N_([0.1], [1.0], (N_([1.0]),)), N_([-0.1], [1.0], (N_([-1.0]),)))))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"depth": 1, "weights": [0.5, 0.6], "points": [[0.0], [1.0]]}))
    paths["bad.json"] = str(bad)
    phi = FunctionalTable((dirac_tower([1.0], 1), dirac_tower([-1.0], 1)), [0.0, float("inf")])
    t = tmp_path / "table.json"
    t.write_text(json.dumps(table_to_dict(phi)))
    paths["table.json"] = str(t)
    paths["dir"] = tmp_path
    return paths


def call(argv, tmp_path, name="out.json"):
    out = tmp_path / name
    code = run(list(argv) + ["--out", str(out)])
    return code, (out.read_text() if out.exists() else None)


def test_ot_and_nested(files):
    tmp = files["dir"]
    code, text = call(["ot", "w2", files["mu.json"], files["nu.json"]], tmp)
    assert code == EX_OK
    doc = json.loads(text)
    assert doc["result"]["value"] == pytest.approx(np.sqrt(6.5))
    assert doc["tolerances"]["solver"] == 1e-9 and "version" in doc
    code, text = call(["nested", "w2", files["P.json"], files["Q.json"]], tmp)
    doc = json.loads(text)
    assert code == EX_OK and doc["result"]["value"] == pytest.approx(np.sqrt(0.5))
    assert doc["result"]["identityResidual"] <= 1e-12


def test_adapted(files):
    code, text = call(["adapted", "aw2", files["A.json"], files["B.json"]], files["dir"])
    assert code == EX_OK
    assert json.loads(text)["result"]["aw2Squared"] == pytest.approx(2.01, abs=1e-12)


def test_convexity(files):
    code, text = call(["convexity", "transform", files["table.json"]], files["dir"])
    assert code == EX_OK
    res = json.loads(text)["result"]
    assert res["transform"] == [1.0, -1.0] and res["inequalityHolds"]
    code, text = call(["convexity", "order", files["mu.json"], files["nu.json"], "--seed", "3"], files["dir"])
    doc = json.loads(text)
    assert code == EX_OK and doc["result"]["verdict"] == "violated" and doc["seed"] == 3


def test_regularity_tau_and_experiment_csv(files):
    tmp = files["dir"]
    code, text = call(["regularity", "tau", files["mu.json"], files["nu.json"]], tmp)
    assert code == EX_OK and json.loads(text)["result"]["tau"] < 1e-6
    code, text = call(
        ["regularity", "experiment", "--seed", "7", "--samples", "3", "--targets", "2", "--grid", "20", "--format", "csv"],
        tmp,
        "exp.csv",
    )
    assert code == EX_OK
    lines = text.splitlines()
    meta = [x for x in lines if x.startswith("#")]
    assert any(x.startswith("# seed=7") for x in meta)
    rows = list(csv.reader([x for x in lines if not x.startswith("#")]))
    assert rows[0][:3] == ["sample", "target", "tau"] and len(rows) == 1 + 6


def test_sample_commands(files):
    tmp = files["dir"]
    code, text = call(["sample", "sheet", "--grid", "4", "--parameters", "2", "--seed", "1"], tmp)
    doc = json.loads(text)
    assert code == EX_OK and np.array(doc["result"]["values"]).shape == (5, 5, 1)
    code, text = call(["sample", "occupation", "--grid", "4", "--parameters", "2", "--blocks", "2"], tmp)
    doc = json.loads(text)
    assert code == EX_OK and doc["result"]["measure"]["depth"] == 2 and doc["seedSource"] == "default"
    code, text = call(["sample", "qwiener", "--grid", "8", "--modes", "3", "--format", "csv"], tmp, "q.csv")
    assert code == EX_OK and "t,x1,x2,x3" in text


def test_byte_identical_reruns(files):
    tmp = files["dir"]
    for argv in (
        ["regularity", "experiment", "--seed", "2", "--samples", "2", "--targets", "2", "--grid", "10"],
        ["sample", "sheet", "--grid", "6", "--seed", "5"],
        ["example", "brenier-failure", "--n", "20"],
    ):
        _, a = call(argv, tmp, "a.out")
        _, b = call(argv, tmp, "b.out")
        assert a == b and a


def test_exit_codes(files, capsys):
    tmp = files["dir"]
    assert call(["ot", "w2", files["mu.json"], str(tmp / "missing.json")], tmp)[0] == EX_NOINPUT
    assert call(["ot", "w2", files["mu.json"], files["nu.json"], "--bogus"], tmp)[0] == EX_USAGE
    assert call(["teleport"], tmp)[0] == EX_USAGE
    assert call(["ot", "w2", files["bad.json"], files["nu.json"]], tmp)[0] == EX_VALIDATION
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["error"] == "validation" and diag["violations"]
    assert call(["nested", "mc", files["P.json"], files["mu.json"]], tmp)[0] == EX_VALIDATION
    assert call(["example", "brenier-failure", "--n", "3"], tmp)[0] == EX_VALIDATION


def test_config_file(files):
    tmp = files["dir"]
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "samples": 2, "targets": 1, "grid": 10, "format": "json"}))
    code, text = call(["regularity", "experiment", "--config", str(cfg)], tmp)
    doc = json.loads(text)
    assert code == EX_OK and doc["seed"] == 9 and len(doc["result"]["records"]) == 2
    # argv overrides the file
    code, text = call(["regularity", "experiment", "--config", str(cfg), "--seed", "4"], tmp)
    assert json.loads(text)["seed"] == 4
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert call(["regularity", "experiment", "--config", str(cfg)], tmp)[0] == EX_USAGE


def test_console_script_module(files):
    r = subprocess.run([sys.executable, "-m", "nestedot.cli", "ot", "mc", files["mu.json"], files["nu.json"]], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["result"]["value"] == pytest.approx(2.0)
