#!/usr/bin/env python3
"""Unstable manifold of (r, θ) = (1, 0) with and without the perturbation h."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _common import run  # noqa: E402

code, out, rep = run("appendix-demo", "appendix.cfg", "runs/appendix", "appendix.json")
print(f"{'h':>8} {'dist(W0,Wh)':>12} {'dist(Wh,W0)':>14}")
for row in rep["rows"]:
    print(f"{row['h']:>8g} {row['dist_fwd']:>12.5f} {row['dist_bwd']:>14.10f}")
print(f"forward decreasing: {rep['forward_decreasing']}, halved: {rep['forward_halved']}, "
      f"backward non-decreasing: {rep['backward_nondecreasing']} (floor {rep['floor']:.6f})")
print(f"clouds written to {out}")
sys.exit(code)
