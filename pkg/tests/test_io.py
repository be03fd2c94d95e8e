import json
import math

import numpy as np
import pytest

from maniforge import io as mio
from maniforge.graph_transform import Section
from maniforge.persistence import ConvergenceRow, ConvergenceTable, PointCloud


@pytest.mark.parametrize("kind, m, with_der", [("cubic", 1, True), ("multilinear", 2, False), ("cubic", 2, True)])
def test_section_round_trip(tmp_path, kind, m, with_der):
    rng = np.random.default_rng(m)
    g, k = 6, 3
    der = rng.normal(size=(g,) * m + (k, m)) if with_der else None
    sec = Section(0.7, rng.normal(size=(g,) * m + (k,)), der, kind, 0.4, 0.9)
    csv_path, side = mio.write_section(tmp_path / "s.csv", sec, {"note": "x"})
    back = mio.read_section(csv_path)
    np.testing.assert_array_equal(back.values, sec.values)
    if with_der:
        np.testing.assert_array_equal(back.derivative, sec.derivative)
    else:
        assert back.derivative is None
    assert (back.rho, back.eps, back.delta, back.interpolation) == (0.7, 0.4, 0.9, kind)
    meta = json.loads(side.read_text())
    assert meta["grid"] == [g] * m and meta["csv"] == "s.csv" and meta["note"] == "x"
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header[:m] == [f"x_{j + 1}" for j in range(m)]
    assert header[m] == "q_1"
    if with_der:
        assert header[m + k] == "dq_1/dx_1"


def test_csv_floats_round_trip_exactly(tmp_path):
    vals = [0.1, 1 / 3, 2.0**-1074, 1e308, -0.0, math.nan, None]
    mio.write_csv(tmp_path / "a.csv", ["v"], [[v] for v in vals])
    header, rows = mio.read_csv(tmp_path / "a.csv")
    assert header == ["v"]
    back = [float(r[0]) if r[0] else None for r in rows]
    for a, b in zip(vals, back):
        if a is None:
            assert b is None
        elif math.isnan(a):
            assert math.isnan(b)
        else:
            assert a == b and math.copysign(1, a) == math.copysign(1, b)


def test_json_is_sorted_and_numpy_safe(tmp_path):
    path = mio.write_json(tmp_path / "x.json", {"b": np.float64(1.5), "a": np.arange(3), "c": np.bool_(True),
                                                 "d": math.inf, "e": 1 + 2j})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5, "c": True, "d": None, "e": [1.0, 2.0]}


def test_trajectory_cloud_and_convergence_files(tmp_path):
    mio.write_trajectory(tmp_path / "t.csv", [0.0, 0.5], np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert (tmp_path / "t.csv").read_text() == "t,c_1,c_2\n0.0,1.0,2.0\n0.5,3.0,4.0\n"
    cloud = PointCloud(np.array([[1.0, 2.0], [3.0, 4.0]]), ("localManifold", "forwardIterate 1"))
    mio.write_cloud(tmp_path / "c.csv", cloud)
    assert (tmp_path / "c.csv").read_text().splitlines()[2] == "forwardIterate 1,3.0,4.0"
    table = ConvergenceTable([ConvergenceRow(0.1, 0.2, None, 0.3, 0.4, True, 5)], None, None)
    mio.write_convergence(tmp_path / "k.csv", tmp_path / "k.json", table)
    assert (tmp_path / "k.csv").read_text() == "h,c0,c1,dist_fwd,dist_bwd\n0.1,0.2,,0.3,0.4\n"
    assert json.loads((tmp_path / "k.json").read_text())["rows"][0]["iterations"] == 5


def test_atomic_write_leaves_no_temporaries(tmp_path):
    mio.write_json(tmp_path / "deep" / "x.json", {"a": 1})
    mio.write_json(tmp_path / "deep" / "x.json", {"a": 2})
    assert [p.name for p in (tmp_path / "deep").iterdir()] == ["x.json"]
    assert json.loads((tmp_path / "deep" / "x.json").read_text()) == {"a": 2}


def test_manifest(tmp_path):
    m = mio.RunManifest("manifold", "abc", {"k": 1})
    m.stage("graph_transform", "converged", iterations=3)
    m.add(tmp_path / "a.csv", tmp_path / "a.csv", tmp_path / "b.json")
    m.exit_code = 0
    data = json.loads(m.write(tmp_path).read_text())
    assert data["files"] == ["a.csv", "b.json"]
    assert data["stages"]["graph_transform"] == {"status": "converged", "iterations": 3}
    assert data["artifact_version"] == mio.ARTIFACT_VERSION and data["finished"]
