#!/usr/bin/env python3
"""Kuramoto-Sivashinsky inertial manifold and the attraction test on random trajectories."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _common import run  # noqa: E402

code, out, rep = run("inertial", "ks_inertial.cfg", "runs/ks_inertial", "inertial_report.json")
print(f"m = {rep['chart']['m']}, converged={rep['converged']} in {rep['iterations']} steps "
      f"(ratio {rep['contraction_ratio']:.3f})")
print(f"C1 check: {rep['c1_error']:.3e} <= {rep['c1_threshold']:.3e}: {rep['c1_pass']}")
print(f"trajectories after t = {rep['trajectory_time']:g}: max distance to the graph "
      f"{rep['max_trajectory_distance']:.3e}, tube eps {rep['eps']:g}, within 5 eps: {rep['within_5eps']}")
sys.exit(code)
