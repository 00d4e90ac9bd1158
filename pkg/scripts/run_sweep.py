#!/usr/bin/env python3
"""Run a parameter sweep and write rows.csv, aggregate.csv and timing.csv.

    python scripts/run_sweep.py scripts/configs/sweep_volume.yaml --out out/volume --workers 4
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from lc_ecodrive.cli import load_sweep
from lc_ecodrive.config import ConfigError, ScenarioConfig, load_scenario
from lc_ecodrive.experiment import run_sweep, write_sweep


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("sweep", type=Path)
    ap.add_argument("--scenario", type=Path, help="base scenario YAML")
    ap.add_argument("--out", type=Path, default=Path("out/sweep"))
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    try:
        spec = load_sweep(args.sweep)
        base = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    res = run_sweep(spec, base, workers=args.workers)
    write_sweep(res, args.out, base)
    for row in res.aggregates:
        mean, std = row["benefit_mean_pct"], row["benefit_std_pct"]
        ben = "n/a" if mean is None else f"{mean:+.3f}% +/- {std:.3f}"
        print(f"threshold={row['threshold']} volume={row['volume']:.0f} mpr={row['mpr']} "
              f"benefit={ben} (runs={row['runs']}, failed={row['failed']})")
    return 2 if res.failed else 0


if __name__ == "__main__":
    sys.exit(main())
