#!/usr/bin/env python3
"""Planar saddle: unstable manifold, condition check and first-order persistence."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _common import CONFIGS  # noqa: E402

from maniforge.cli import cli_dispatch  # noqa: E402


def main():
    base = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/saddle2")
    codes = {}
    for sub, cfg, tag in (("manifold", "saddle2.cfg", "manifold"),
                          ("check-conditions", "saddle2_conditions.cfg", "conditions"),
                          ("converge", "saddle2_converge.cfg", "converge")):
        codes[tag] = cli_dispatch([sub, "--config", str(CONFIGS / cfg), "--out", str(base / tag)])
    import json

    rep = json.loads((base / "manifold" / "transform_report.json").read_text())
    cond = json.loads((base / "conditions" / "conditions.json").read_text())
    conv = json.loads((base / "converge" / "convergence.json").read_text())
    print(f"manifold: converged={rep['converged']} after {rep['iterations']} steps, "
          f"ratio {rep['contraction_ratio']:.4f}, C1 check {rep['c1_pass']}")
    print(f"conditions: stability {cond['stability_lhs']:.4f}, smoothing {cond['smoothing_lhs']:.4f}, "
          f"pass={cond['pass']}")
    for row in conv["rows"]:
        print(f"  h={row['h']:<8g} C0={row['c0']:.3e}  C1={row['c1']:.3e}")
    print(f"fitted slopes: C0 {conv['fit_slope']:.3f}, C1 {conv['fit_slope_c1']:.3f}")
    sys.exit(max(codes.values()))


if __name__ == "__main__":
    main()
