#!/usr/bin/env python3
"""Torus Navier-Stokes: unstable manifold at two resolutions against a finer reference (a few minutes)."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _common import run  # noqa: E402

code, out, table = run("converge", "nse_persistence.cfg", "runs/nse_persistence", "convergence.json")
for row in table["rows"]:
    print(f"h = {row['h']:.4f}: C0 distance to reference {row['c0']:.4f}, converged={row['converged']}")
sys.exit(code)
