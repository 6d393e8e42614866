import json
import subprocess
import sys

import numpy as np
import pytest

from eigkoop.cli import git_blob_hash, main
from eigkoop.dynamics import TrajectoryDataset

SMALL = {
    "version": 1,
    "system": {"preset": "duffing"},
    "data": {"trajectories": 12, "duration": 2.0, "Ts": 0.01, "seed": 3,
             "controlled": {"duration": 1.0}},
    "lift": {"N": 8, "eigmode": "lattice"},
    "predict": {"x0": [0.3, -0.2], "horizon": 0.5},
    "table": {"N": [4, 8], "eigmodes": ["lattice"], "controls": [None], "trials": 5,
              "horizon": 0.5},
    "mpc": {"Np": 10, "Q": [[1, 0], [0, 0.1]], "R": [[1e-4]], "u_min": [-1], "u_max": [1],
            "reference": {"times": [0], "values": [[0.5, 0]]}, "x0": [0, 0], "duration": 0.2},
    "outputs": {"timings": False},
}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(scope="module")
def learned(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = _write(tmp, SMALL)
    out = str(tmp / "out")
    assert main(["generate", "--config", cfg, "--out", out]) == 0
    assert main(["learn", "--config", cfg, "--out", out]) == 0
    return tmp, cfg, out


def test_git_blob_hash_matches_git():
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_generate_outputs_and_manifest(learned):
    tmp, cfg, out = learned
    ds = TrajectoryDataset.from_csv(f"{out}/data.csv")
    assert (ds.Mt, ds.Ms) == (12, 200)
    dc = TrajectoryDataset.from_csv(f"{out}/data_controlled.csv")
    assert (dc.Mt, dc.Ms, dc.m) == (12, 100, 1)
    man = json.loads(open(f"{out}/manifest.json").read())
    assert man["seed"] == 3
    assert man["files"]["data.csv"] == git_blob_hash(open(f"{out}/data.csv", "rb").read())


def test_generate_is_deterministic(learned, tmp_path):
    _, cfg, out = learned
    assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "data.csv").read_bytes() == open(f"{out}/data.csv", "rb").read()
    assert main(["generate", "--config", cfg, "--out", str(tmp_path), "--seed", "4"]) == 0
    assert (tmp_path / "data.csv").read_bytes() != open(f"{out}/data.csv", "rb").read()


def test_learn_writes_predictor_and_report(learned):
    _, _, out = learned
    rep = json.loads(open(f"{out}/learn_report.json").read())
    assert len(rep["objective_init"]) == 2
    pred = json.loads(open(f"{out}/predictor.json").read())
    assert "Bd" in pred and pred["lift"]["extension"]["kind"] == "linear"


def test_predict_csv_and_svg(learned):
    _, cfg, out = learned
    assert main(["predict", "--config", cfg, "--out", out]) == 0
    lines = open(f"{out}/predict.csv").read().splitlines()
    assert lines[0] == "t,x1,x2,xhat1,xhat2,u1"
    assert len(lines) == 52
    assert open(f"{out}/predict.svg").read().startswith("<svg")


def test_predict_zero_steps(learned, tmp_path):
    _, _, out = learned
    doc = dict(SMALL, predict={"x0": [0.3, -0.2], "horizon": 0.0, "control": None})
    cfg = _write(tmp_path, doc)
    assert main(["predict", "--config", cfg, "--out", out]) == 0
    assert len(open(f"{out}/predict.csv").read().splitlines()) == 2


def test_mpc_log_and_determinism(learned):
    _, cfg, out = learned
    assert main(["mpc", "--config", cfg, "--out", out]) == 0
    first = open(f"{out}/mpc_log.csv", "rb").read()
    assert main(["mpc", "--config", cfg, "--out", out]) == 0
    assert open(f"{out}/mpc_log.csv", "rb").read() == first
    rows = first.decode().splitlines()
    assert rows[0] == "t,x1,x2,u1,ref1,ref2,qp_iters,lift_ms,solve_ms"
    assert len(rows) == 21
    u = np.array([float(r.split(",")[3]) for r in rows[1:]])
    assert np.all(np.abs(u) <= 1 + 1e-8)


def test_mpc_zero_duration_header_only(learned, tmp_path):
    _, _, out = learned
    doc = json.loads(json.dumps(SMALL))
    doc["mpc"]["duration"] = 0.0
    assert main(["mpc", "--config", _write(tmp_path, doc), "--out", out]) == 0
    assert open(f"{out}/mpc_log.csv").read().splitlines() == [
        "t,x1,x2,u1,ref1,ref2,qp_iters,lift_ms,solve_ms"]


def test_mpc_infeasible_constraints(learned, tmp_path, capsys):
    _, _, out = learned
    doc = json.loads(json.dumps(SMALL))
    doc["mpc"]["u_min"], doc["mpc"]["u_max"] = [2.0], [-2.0]
    code = main(["mpc", "--config", _write(tmp_path, doc), "--out", out])
    assert code == 3
    assert "infeasib" in capsys.readouterr().err.lower()


def test_table_outputs(learned, tmp_path):
    _, cfg, _ = learned
    assert main(["table", "--config", cfg, "--out", str(tmp_path)]) == 0
    wide = (tmp_path / "table.csv").read_text().splitlines()
    assert wide[0] == "control,eigenvalues,N=4,N=8"
    assert wide[1].startswith("none,lattice,")
    trials = (tmp_path / "table_trials.csv").read_text().splitlines()
    assert len(trials) == 1 + 2 * 5
    assert trials[0] == "system,N,eigenvalues,control,trial,x0_1,x0_2,error"


def test_missing_controlled_data(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    (out / "data_controlled.csv").unlink()
    assert main(["learn", "--config", cfg, "--out", str(out)]) == 4
    assert "fit_B: controlled dataset required" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = dict(SMALL, lift={"N": 8, "typo_key": 1})
    assert main(["generate", "--config", _write(tmp_path, bad), "--out", str(tmp_path)]) == 2
    assert "typo_key" in capsys.readouterr().err
    assert not (tmp_path / "data.csv").exists()
    assert main(["generate", "--out", str(tmp_path)]) == 2


def test_missing_config_file_exit_4(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 4


def test_selftest_subprocess():
    r = subprocess.run([sys.executable, "-m", "eigkoop.cli", "selftest"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert r.stdout.count("[PASS]") == 5
