"""CSV/JSON emitters and the run manifest.

Output is deterministic. Floats go through ``repr`` (shortest round-trip
form) and JSON keys are sorted.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph_transform import Section
from .persistence import ConvergenceTable, PointCloud

ARTIFACT_VERSION = "0.1.0"


def _num(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> Path:
    _atomic_write(Path(path), json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return Path(path)


def write_csv(path, header, rows) -> Path:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) for v in row])
    _atomic_write(Path(path), buf.getvalue())
    return Path(path)


def read_csv(path):
    """Header row and the remaining rows as strings."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_trajectory(path, times, states) -> Path:
    states = np.atleast_2d(states)
    header = ["t"] + [f"c_{i + 1}" for i in range(states.shape[1])]
    return write_csv(path, header, ([t, *s] for t, s in zip(times, states)))


def section_header(m: int, k: int, with_derivative: bool) -> list:
    header = [f"x_{j + 1}" for j in range(m)] + [f"q_{i + 1}" for i in range(k)]
    if with_derivative:
        header += [f"dq_{i + 1}/dx_{j + 1}" for i in range(k) for j in range(m)]
    return header


def write_section(path, section: Section, extra: dict | None = None) -> tuple[Path, Path]:
    """Node CSV plus the sidecar ``<name>.json``."""
    path = Path(path)
    nodes, vals = section.nodes, section.flat_values
    der = section.flat_derivative
    header = section_header(section.m, section.k, der is not None)
    cols = [nodes, vals] + ([der.reshape(der.shape[0], -1)] if der is not None else [])
    write_csv(path, header, np.hstack(cols))
    side = {
        "m": section.m,
        "k": section.k,
        "rho": section.rho,
        "eps": section.eps,
        "delta": section.delta,
        "grid": [section.g] * section.m,
        "interpolation": section.interpolation,
        "has_derivative": der is not None,
        "csv": path.name,
    }
    side.update(extra or {})
    sidecar = path.with_suffix(".json")
    write_json(sidecar, side)
    return path, sidecar


def read_section(path) -> Section:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    m, k, g = side["m"], side["k"], side["grid"][0]
    vals = data[:, m : m + k].reshape((g,) * m + (k,))
    der = None
    if side["has_derivative"]:
        der = data[:, m + k :].reshape((g,) * m + (k, m))
    return Section(side["rho"], vals, der, side["interpolation"], side["eps"], side["delta"])


def write_convergence(path_csv, path_json, table: ConvergenceTable) -> tuple[Path, Path]:
    rows = [(r.h, r.c0, r.c1, r.dist_fwd, r.dist_bwd) for r in table.rows]
    write_csv(path_csv, ["h", "c0", "c1", "dist_fwd", "dist_bwd"], rows)
    write_json(path_json, table.to_dict())
    return Path(path_csv), Path(path_json)


def write_cloud(path, cloud: PointCloud) -> Path:
    header = ["provenance"] + [f"c_{i + 1}" for i in range(cloud.points.shape[1])]
    return write_csv(path, header, ([p, *x] for p, x in zip(cloud.provenance, cloud.points)))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    config: dict
    artifact_version: str = ARTIFACT_VERSION
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    finished: str | None = None
    stages: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    exit_code: int | None = None

    def stage(self, name: str, status: str, **info):
        self.stages[name] = {"status": status, **info}

    def add(self, *paths):
        for p in paths:
            name = Path(p).name
            if name not in self.files:
                self.files.append(name)

    def write(self, directory) -> Path:
        self.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        return write_json(Path(directory) / "manifest.json", self.__dict__)
