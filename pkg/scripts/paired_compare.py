#!/usr/bin/env python3
"""Paired baseline/LC comparison of one scenario over a range of seeds."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from lc_ecodrive.config import ConfigError, ScenarioConfig, load_scenario
from lc_ecodrive.experiment import paired_compare, run_paired


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", type=Path)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--volume", type=float)
    ap.add_argument("--mpr", type=float)
    ap.add_argument("--threshold", type=float)
    args = ap.parse_args()
    try:
        cfg = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
        if args.volume is not None:
            cfg = cfg.with_(demand={"volume_per_lane": (args.volume,) * cfg.network.lanes})
        if args.mpr is not None:
            cfg = cfg.with_(demand={"mpr": args.mpr})
        if args.threshold is not None:
            cfg = cfg.with_(lc={"threshold": args.threshold})
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    base, lc = run_paired(cfg, range(args.seeds))
    res = paired_compare(base, lc)
    print("seed,energy_base_J,energy_lc_J,benefit_pct,travel_increase_pct")
    for s, b, l, ben, tti in zip(res.seeds, base, lc, res.benefit_pct, res.travel_increase_pct):
        print(f"{s},{b.energy_J:.1f},{l.energy_J:.1f},{ben:.3f},{tti:.3f}")
    print(f"mean benefit {res.mean_benefit:+.3f}% (std {res.std_benefit:.3f}), "
          f"mean travel-time increase {res.mean_travel_increase:+.3f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
