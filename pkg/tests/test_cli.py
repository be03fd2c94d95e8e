import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from maniforge.cli import cli_dispatch, output_directory
from maniforge.config import parse_config

CONFIGS = Path(__file__).parent.parent / "configs"


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def outputs(directory: Path) -> dict:
    """File contents keyed by name, with manifest timestamps removed."""
    files = {}
    for p in sorted(directory.iterdir()):
        if p.name == "manifest.json":
            data = json.loads(p.read_text())
            data.pop("started")
            data.pop("finished")
            files[p.name] = json.dumps(data, sort_keys=True).encode()
        else:
            files[p.name] = p.read_bytes()
    return files


def test_manifold_run_and_determinism(tmp_path):
    cfg = str(CONFIGS / "saddle2.cfg")
    assert cli_dispatch(["manifold", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli_dispatch(["manifold", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert set(a) == {"config.resolved.cfg", "manifest.json", "section.csv", "section.json",
                      "transform_report.json"}
    assert a == b
    report = json.loads((tmp_path / "a" / "transform_report.json").read_text())
    assert report["converged"] and report["c1_pass"]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and "section.csv" in manifest["files"]
    data = np.loadtxt(tmp_path / "a" / "section.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(data[:, 1], data[:, 0] ** 2 / 3, atol=1e-8)


def test_fixed_point_subcommand(tmp_path):
    cfg = write(tmp_path, "[model]\nname = Saddle2\n[experiment]\nguess = 0.1, 0.1\n")
    assert cli_dispatch(["fixed-point", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    data = json.loads((tmp_path / "o" / "fixed_point.json").read_text())
    assert max(abs(x) for x in data["state"]) <= 1e-10
    assert data["hyperbolic"] and data["unstable_count"] == 1


def test_check_conditions_subcommand(tmp_path):
    out = tmp_path / "o"
    assert cli_dispatch(["check-conditions", "--config", str(CONFIGS / "saddle2_conditions.cfg"),
                         "--out", str(out)]) == 0
    data = json.loads((out / "conditions.json").read_text())
    assert data["pass"]
    assert abs(data["stability_lhs"] - 0.5) <= 1e-9 and abs(data["smoothing_lhs"] - 0.25) <= 1e-9
    assert abs(data["a"] - 0.5) <= 1e-9


def test_converge_subcommand(tmp_path):
    out = tmp_path / "o"
    assert cli_dispatch(["converge", "--config", str(CONFIGS / "saddle2_converge.cfg"), "--out", str(out)]) == 0
    lines = (out / "convergence.csv").read_text().splitlines()
    assert lines[0] == "h,c0,c1,dist_fwd,dist_bwd" and len(lines) == 5
    assert abs(json.loads((out / "convergence.json").read_text())["fit_slope"] - 1.0) <= 0.2


def test_delta_above_one_is_a_config_error(tmp_path):
    cfg = write(tmp_path, "[manifold]\ndelta = 1.5\n")
    err = tmp_path / "err.json"
    assert cli_dispatch(["manifold", "--config", cfg, "--out", str(tmp_path / "o"), "--error-file", str(err)]) == 2
    record = json.loads(err.read_text())
    assert record["key"] == "manifold.delta" and record["line"] == 2 and record["exit_code"] == 2


def test_config_error_lands_in_out_directory(tmp_path):
    cfg = write(tmp_path, "[model]\ntau = -1\n")
    assert cli_dispatch(["manifold", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "error.json").read_text())["key"] == "model.tau"


def test_model_error_is_exit_2(tmp_path):
    cfg = write(tmp_path, "[model]\nname = NSETorus\n[parameters]\nN = 4\n")  # forcing mode not resolved
    assert cli_dispatch(["fixed-point", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "not resolved" in json.loads((tmp_path / "o" / "error.json").read_text())["message"]


def test_non_convergence_is_exit_3_with_outputs(tmp_path):
    cfg = write(tmp_path, "[manifold]\ndelta = 1.0\nmax_iter = 2\n")
    out = tmp_path / "o"
    assert cli_dispatch(["manifold", "--config", cfg, "--out", str(out)]) == 3
    assert (out / "section.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 3


def test_numerical_failure_is_exit_3(tmp_path):
    # a wrong guess dimension is a config error; a nonhyperbolic point is numerical
    cfg = write(tmp_path, "[model]\nname = AppendixPolar\ntau = 0.5\ndt = 0.01\n"
                          "[experiment]\nguess = -1.0, 1e-9\nmargin = 1e-5\nfixed_point_method = generator\n"
                          "[manifold]\nnewton_tol = 1e-12\n")
    out = tmp_path / "o"
    assert cli_dispatch(["manifold", "--config", cfg, "--out", str(out)]) == 3
    assert json.loads((out / "error.json").read_text())["type"] == "HyperbolicityError"
    bad = write(tmp_path, "[experiment]\nguess = 1, 2, 3\n", "bad.cfg")
    assert cli_dispatch(["manifold", "--config", bad, "--out", str(tmp_path / "p")]) == 2


def test_unknown_subcommand_and_missing_file(tmp_path):
    assert cli_dispatch(["frobnicate", "--config", "x"]) == 2
    assert cli_dispatch(["manifold", "--config", str(tmp_path / "none.cfg"),
                         "--error-file", str(tmp_path / "e.json")]) == 2
    assert "cannot read" in json.loads((tmp_path / "e.json").read_text())["message"]


def test_output_directory_priority(tmp_path, monkeypatch):
    cfg = parse_config(f"output.directory = {tmp_path}/from_config\n")
    plain = parse_config("")
    monkeypatch.setenv("MANIFORGE_OUT", str(tmp_path / "env"))
    assert output_directory(str(tmp_path / "arg"), cfg, "manifold") == tmp_path / "arg"
    assert output_directory(None, cfg, "manifold") == tmp_path / "from_config"
    assert output_directory(None, plain, "manifold") == tmp_path / "env" / f"manifold-{plain.hash()[:12]}"
    monkeypatch.delenv("MANIFORGE_OUT")
    assert output_directory(None, plain, "manifold") == Path("maniforge-runs") / f"manifold-{plain.hash()[:12]}"


def test_console_script_entry_point(tmp_path):
    env = dict(os.environ, MANIFORGE_OUT=str(tmp_path))
    cfg = write(tmp_path, "[experiment]\nguess = 0.2, 0.0\n")
    proc = subprocess.run([sys.executable, "-m", "maniforge.cli", "fixed-point", "--config", cfg],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    (run,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    assert run.name.startswith("fixed-point-") and (run / "fixed_point.json").exists()
