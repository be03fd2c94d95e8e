"""Shared helper: run a subcommand on a shipped config and load its JSON output."""

import argparse
import json
import sys
from pathlib import Path

from maniforge.cli import cli_dispatch

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(subcommand: str, config: str, default_out: str, result: str):
    parser = argparse.ArgumentParser(description=f"maniforge {subcommand} on configs/{config}")
    parser.add_argument("--out", default=default_out, help=f"output directory (default {default_out})")
    args = parser.parse_args()
    code = cli_dispatch([subcommand, "--config", str(CONFIGS / config), "--out", args.out])
    out = Path(args.out)
    if code not in (0, 3):
        print(f"{subcommand} failed with exit code {code}; see {out / 'error.json'}", file=sys.stderr)
        sys.exit(code)
    return code, out, json.loads((out / result).read_text())
