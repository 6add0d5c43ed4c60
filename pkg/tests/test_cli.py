import json
import subprocess
import sys
from pathlib import Path

import pytest

from fbsde_relax.builtins import BUILTINS
from fbsde_relax.cli import main

ROOT = Path(__file__).resolve().parents[1]


def test_list_builtins(capsys):
    assert main(["list-builtins"]) == 0
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert names == sorted(BUILTINS)


@pytest.mark.parametrize("name", ["chattering", "coupled-linear"])
def test_describe(capsys, name):
    assert main(["describe", name]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["name"] == name and d["params"] == BUILTINS[name].params


def test_describe_unknown(capsys):
    assert main(["describe", "nope"]) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "builtin"


def test_validate_prints_hash(capsys):
    assert main(["validate", str(ROOT / "scenarios" / "lq_small.yaml")]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["status"] == "valid" and len(d["scenario_hash"]) == 16


def test_invalid_file_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("builtin: lq-decoupled\nn_paths: -3\n")
    assert main(["validate", str(p)]) == 2
    rec = json.loads(capsys.readouterr().err)
    assert rec["status"] == "invalid" and rec["field"] == "n_paths" and rec["line"] == 2


def test_run_with_flags(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "lq-decoupled", "--paths", "2000", "--steps", "8", "--seed", "3",
                 "--no-diagnostics", "--out", str(out)])
    assert code == 0
    d = json.loads(capsys.readouterr().out)
    sc = json.loads((out / "scenario.json").read_text())
    assert d["scenario_hash"] == sc["scenario_hash"]
    assert sc["scenario"]["n_paths"] == 2000 and sc["scenario"]["N"] == 8 and sc["scenario"]["seed"] == 3
    assert not (out / "tightness.csv").exists()


def test_run_optimize_flag(tmp_path, capsys):
    out = tmp_path / "opt"
    assert main(["run", "chattering", "--steps", "4", "--no-diagnostics", "--optimize", "--out", str(out)]) == 0
    assert (out / "trace.csv").exists()
    s = json.loads((out / "summary.json").read_text())
    assert s["optimizer"]["J_final"] <= s["optimizer"]["J_initial"]


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_failed_run_exit_nonzero(tmp_path, capsys):
    p = tmp_path / "blow.yaml"
    p.write_text('coefficients: {b: "exp(exp(exp(x)))", sigma: "1", phi: "x"}\nx0: 5.0\nn_paths: 4\n'
                 "diagnostics: false\n")
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().out)["status"] == "failed"
    assert (tmp_path / "o" / "failure.json").exists()


def test_console_module_entry():
    r = subprocess.run([sys.executable, "-m", "fbsde_relax", "list-builtins"], capture_output=True, text=True)
    assert r.returncode == 0 and "chattering" in r.stdout
    r = subprocess.run([sys.executable, "-m", "fbsde_relax"], capture_output=True, text=True)
    assert r.returncode == 2
