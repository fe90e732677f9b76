import copy
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from lvhg.cli import PI_FILE, config_hash, load_config, main

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "seed": 7,
    "noise": {"alpha": 1.5, "atoms": [
        {"dir": [1.0, 0.0], "w": 0.5}, {"dir": [-1.0, 0.0], "w": 0.5},
        {"dir": [0.0, 1.0], "w": 0.5}, {"dir": [0.0, -1.0], "w": 0.5}]},
    "coefficients": {"family": "F1"},
    "sim": {"scheme": "increment-euler", "dt": 0.01, "x0": [0.0, 0.0]},
    "validate": {"grid_n": 16},
    "ergodic": {
        "occupation": {"total_time": 20.0, "n_chains": 16, "m": 8},
        "grid_chain": {"t0": 0.1, "n_samples": 100, "m": 8, "dt": 0.01},
        "tv_tolerance": 0.5,
    },
    "corrector": {
        "m": 8,
        "gap": {"dt": 0.01, "n_lags": 6, "n_chains": 32, "total_time": 1.0},
        "mc": {"n_paths": 64, "dt": 0.01, "tolerance": 10.0},
        "qv": {"n": [4, 16], "t": 0.5, "n_paths": 20, "tolerance": 10.0},
    },
    "verify": {"n": [4, 16], "n_paths": 300, "t": 0.5, "D_threshold": 1.0,
               "ks_threshold": 1.0, "alpha_tol": 2.0, "write_ensembles": True},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    cfg = copy.deepcopy(cfg)
    cfg["output_dir"] = str(tmp_path / "out")
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def lvhg(*args):
    return main([str(a) for a in args])


def test_validate_pass(tmp_path):
    p = write_cfg(tmp_path, TINY)
    assert lvhg("validate", "--config", p) == 0
    rep = json.loads((tmp_path / "out" / "validate.json").read_text())
    assert rep["status"] == "PASS"
    assert rep["checks"]["A3"]["c1"] == pytest.approx(1.0)
    assert rep["checks"]["A5"]["min_abs_det_sigma"] == pytest.approx(0.25, abs=1e-3)


def test_validate_bad_alpha(tmp_path):
    cfg = copy.deepcopy(TINY)
    cfg["noise"]["alpha"] = 0.9
    assert lvhg("validate", "--config", write_cfg(tmp_path, cfg)) == 2
    rep = json.loads((tmp_path / "out" / "validate.json").read_text())
    assert rep["checks"]["A1"]["status"] == "FAIL"


def test_validate_asymmetric_atoms(tmp_path):
    cfg = copy.deepcopy(TINY)
    cfg["noise"]["atoms"][0]["w"] = 0.7
    assert lvhg("validate", "--config", write_cfg(tmp_path, cfg)) == 2
    rep = json.loads((tmp_path / "out" / "validate.json").read_text())
    assert rep["checks"]["A2"]["status"] == "FAIL"


def test_missing_budget(tmp_path):
    cfg = copy.deepcopy(TINY)
    del cfg["ergodic"]["occupation"]["total_time"]
    assert lvhg("invariant", "--config", write_cfg(tmp_path, cfg)) == 2
    assert lvhg("verify", "--config", tmp_path / "nope.json") == 2


def test_constant_drift_corrector_vanishes(tmp_path):
    cfg = copy.deepcopy(TINY)
    cfg["coefficients"] = {"family": "constant", "dim": 2, "drift": [0.3, -0.1]}
    assert lvhg("corrector", "--config", write_cfg(tmp_path, cfg)) == 0
    out = tmp_path / "out"
    rep = json.loads((out / "corrector.json").read_text())
    assert rep["sup_norm"] == 0.0
    rows = np.loadtxt(out / "corrector_pde.csv", delimiter=",", comments="#", skiprows=2)
    assert rows.shape[1] == 5 and np.all(rows[:, 3:] == 0.0)


def test_pipeline_headers_and_report(tmp_path):
    p = write_cfg(tmp_path, TINY)
    out = tmp_path / "out"
    for cmd in ("validate", "invariant", "corrector", "verify"):
        assert lvhg(cmd, "--config", p, "--threads", 2) == 0, cmd
    h = config_hash(load_config(p))
    for f in out.glob("*.csv"):
        assert f.read_text().startswith(f"# config_hash={h},seed=7"), f.name
    for f in out.glob("*.json"):
        obj = json.loads(f.read_text())
        assert obj["config_hash"] == h and obj["seed"] == 7
    homog = json.loads((out / "homogenized.json").read_text())
    assert homog["provenance"]["pi_source"] == "file"
    assert sorted(x.name for x in out.glob("ensemble_n*.lvhg")) == ["ensemble_n16.lvhg", "ensemble_n4.lvhg"]
    assert lvhg("report", "--config", p) == 0
    first = (out / "report.json").read_bytes()
    assert lvhg("report", "--out", out) == 0
    assert (out / "report.json").read_bytes() == first
    rep = json.loads(first)
    assert rep["status"] == "PASS" and "numpy" in rep["versions"]

    # a stale artifact from another config is flagged
    stale = json.loads((out / "invariant.json").read_text())
    stale["config_hash"] = "0" * 64
    (out / "invariant.json").write_text(json.dumps(stale))
    assert lvhg("report", "--config", p) == 2
    assert "invariant.json" in json.loads((out / "report.json").read_text())["hash_mismatch"]


def test_report_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert lvhg("report", "--out", tmp_path / "empty") == 2


def test_seed_changes_hash(tmp_path):
    p = write_cfg(tmp_path, TINY)
    a = config_hash(load_config(p))
    assert config_hash(load_config(p, seed=8)) != a
    assert config_hash(load_config(p, out=str(tmp_path / "elsewhere"))) == a


def test_corrupted_pi_file(tmp_path):
    p = write_cfg(tmp_path, TINY)
    out = tmp_path / "out"
    out.mkdir()
    (out / PI_FILE).write_text("{not json")
    assert lvhg("verify", "--config", p) == 2
    (out / PI_FILE).write_text(json.dumps({"config_hash": "f" * 64, "seed": 7}))
    assert lvhg("verify", "--config", p) == 2


def test_thread_invariance(tmp_path):
    outs = []
    for threads in (1, 3):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        p = write_cfg(d, TINY)
        assert lvhg("invariant", "--config", p, "--threads", threads) == 0
        assert lvhg("verify", "--config", p, "--threads", threads) == 0
        outs.append(d / "out")
    names = sorted(f.name for f in outs[0].iterdir())
    assert names == sorted(f.name for f in outs[1].iterdir())
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n


def test_acceptance_failure_exit_code(tmp_path):
    cfg = copy.deepcopy(TINY)
    cfg["ergodic"]["tv_tolerance"] = 1e-9
    assert lvhg("invariant", "--config", write_cfg(tmp_path, cfg)) == 4


def test_console_entry_point(tmp_path):
    p = write_cfg(tmp_path, TINY)
    r = subprocess.run([sys.executable, "-m", "lvhg.cli", "validate", "--config", str(p)],
                       capture_output=True, text=True, cwd=ROOT)
    assert r.returncode == 0, r.stderr
