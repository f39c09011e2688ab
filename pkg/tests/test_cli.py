import csv
import json
import subprocess
import sys

import pytest

from pancal.cli import main


def run(tmp, *argv):
    assert main(["--out-dir", str(tmp), *argv]) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    run(d, "sample", "--n-cloud", "400", "--k", "15", "--sa-iters", "200", "--sa-stall", "100")
    run(d, "gen-data", "--triplets", str(d / "triplets.csv"))
    run(d, "pretrain", "--data", str(d / "data.csv"), "--epochs", "4", "--hidden", "4")
    run(d, "indicator", "--model", str(d / "model.json"), "--data", str(d / "triplets.csv"))
    run(d, "validate", "--model", "set3", "--n", "11", "--max-stretch", "1.2")
    run(d, "synth-dic", "--total", "0.5", "--increments", "5")
    run(d, "transfer", "--model", "set2", "--dic", str(d / "dic.json"), "--mesh", str(d / "mesh.json"),
        "--max-iter", "2")
    run(d, "report")
    return d


def test_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "pancal.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "transfer" in r.stdout


def test_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as e:
        main(["sample", "--bogus"])
    assert e.value.code == 2


def test_missing_required(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 2


def test_pipeline_outputs(pipeline):
    for name in ("triplets.csv", "data.csv", "model.json", "telemetry.csv", "indicator.csv",
                 "validation_r2.csv", "validation_uniaxial_nr.csv", "dic.json", "mesh.json",
                 "calibrated.json", "history.csv", "report.md", "report.csv"):
        assert (pipeline / name).exists(), name
    with open(pipeline / "triplets.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 15
    m = json.loads((pipeline / "manifest_transfer.json").read_text())
    assert m["command"] == "transfer" and len(m["config_hash"]) == 64 and m["seed"] == 0
    assert "## Calibration" in (pipeline / "report.md").read_text()


def test_byte_identical_rerun(pipeline, tmp_path):
    run(tmp_path, "sample", "--n-cloud", "400", "--k", "15", "--sa-iters", "200", "--sa-stall", "100")
    run(tmp_path, "gen-data", "--triplets", str(tmp_path / "triplets.csv"))
    run(tmp_path, "pretrain", "--data", str(tmp_path / "data.csv"), "--epochs", "4", "--hidden", "4")
    for name in ("triplets.csv", "data.csv", "model.json", "telemetry.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / name).read_bytes(), name


def test_config_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 3\n[sample]\nn_cloud = 300\nk = 7\nsa_iters = 50\nsa_stall = 20\n')
    run(tmp_path, "--config", str(cfg), "sample")
    m = json.loads((tmp_path / "manifest_sample.json").read_text())
    assert m["seed"] == 3 and m["config"]["k"] == 7
    with open(tmp_path / "triplets.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 7


def test_bad_config(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["--config", str(tmp_path / "missing.toml"), "report"])
    assert e.value.code == 2
