import json

import numpy as np
import pytest

from lqg_lab import cli
from lqg_lab import snapshot as sn

SMALL = ["--grid-n", "64", "--box", "2", "--gamma", "1"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["sample-field", "--out", str(out), "--seed", "4", *SMALL]) == 0
    assert cli.main(["build-measure", "--out", str(out), "--seed", "4", *SMALL, "--radii", "0.1,0.2,0.3,0.5"]) == 0
    return out


def test_pipeline_outputs(run_dir):
    for name in ("field.lqgf", "measure.lqgf", "field_report.csv", "measure_report.json"):
        assert (run_dir / name).exists()
    snap = sn.load(run_dir / "measure.lqgf")
    assert snap.flags & sn.MEASURE and snap.flags & sn.FIELD
    rep = json.loads((run_dir / "measure_report.json").read_text())
    assert rep["provenance"]["seed"] == 4
    assert rep["provenance"]["snapshot_hash"] == sn.load(run_dir / "field.lqgf").content_hash()


def test_inputs_not_mutated(run_dir):
    before = (run_dir / "field.lqgf").read_bytes()
    assert cli.main(["build-measure", "--out", str(run_dir), *SMALL]) == 0
    assert (run_dir / "field.lqgf").read_bytes() == before


def test_same_seed_same_field(run_dir, tmp_path):
    assert cli.main(["sample-field", "--out", str(tmp_path), "--seed", "4", *SMALL]) == 0
    assert (tmp_path / "field.lqgf").read_bytes() == (run_dir / "field.lqgf").read_bytes()


def test_downstream_commands(run_dir):
    o = str(run_dir)
    assert cli.main(["simulate-lbm", "--out", o, "--t-grid", "0.005,0.01"]) == 0
    assert cli.main(["exit-stats", "--out", o, "--walkers", "300", "--radii", "0.1,0.2,0.4"]) == 0
    assert cli.main(["heatkernel", "--out", o, "--walkers", "1000",
                     "--t-grid", "0.01,0.02,0.04,0.07,0.1,0.2"]) == 0
    assert cli.main(["spectral", "--out", o, "--eigen-k", "8", "--mask", "rect:-0.5,0.5,-0.5,0.5"]) == 0
    rows = (run_dir / "exit_report.csv").read_text().splitlines()
    assert rows[0].startswith("quantity,value,stderr") and "config_hash" in rows[0]
    assert np.load(run_dir / "eigenvalues.npy").size == 8


def test_missing_snapshot_is_dependency_error(tmp_path):
    assert cli.main(["heatkernel", "--out", str(tmp_path)]) == cli.MISSING
    assert cli.main(["build-measure", "--out", str(tmp_path)]) == cli.MISSING


def test_field_snapshot_without_measure(run_dir):
    assert cli.main(["spectral", "--out", str(run_dir), "--snapshot", str(run_dir / "field.lqgf")]) == cli.MISSING


def test_corrupt_snapshot(tmp_path, run_dir):
    bad = tmp_path / "bad.lqgf"
    bad.write_bytes((run_dir / "measure.lqgf").read_bytes()[:-10])
    assert cli.main(["spectral", "--out", str(tmp_path), "--snapshot", str(bad)]) == cli.MISSING


def test_config_errors(tmp_path):
    assert cli.main(["sample-field", "--out", str(tmp_path), "--gamma", "2.5"]) == cli.USAGE
    cfg = tmp_path / "c.cfg"
    cfg.write_text("gamma = 1\nbogus = 3\n")
    assert cli.main(["sample-field", "--config", str(cfg)]) == cli.USAGE
    assert cli.main(["no-such-command"]) == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"grid_n = 32\nbox = 1\nout = {tmp_path / 'o'}\nseed = 2\n")
    assert cli.main(["sample-field", "--config", str(cfg), "--seed", "3"]) == 0
    written = (tmp_path / "o" / "sample-field.config").read_text()
    assert "seed = 3" in written and "grid_n = 32" in written


def test_verify_quick_subset(tmp_path, capsys):
    code = cli.main(["verify", "--out", str(tmp_path), "--profile", "quick", "--only", "AC1", "AC13"])
    assert code == 0
    out = capsys.readouterr().out
    assert "[PASS] AC1" in out and "[PASS] AC13" in out
    data = json.loads((tmp_path / "verify.json").read_text())
    assert [c["key"] for c in data["checks"]] == ["AC1", "AC13"]
