"""Command-line entry point.

Exit codes: 0 success, 2 some scenarios failed, 3 bad configuration or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from .config import ConfigError, ScenarioConfig, load_scenario
from .experiment import (PairedResult, SweepSpec, paired_compare, precision_recall,
                         run_sweep, write_csv, write_sweep)
from .lcpredict import write_forecast_log
from .microsim import ScenarioMetrics, run_scenario

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 2, 3

log = logging.getLogger("lc_ecodrive")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lc-ecodrive", description="Run eco-driving scenarios with or without lane-change prediction.")
    p.add_argument("--scenario", type=Path, help="scenario YAML (defaults to built-in values)")
    p.add_argument("--sweep", type=Path, help="sweep YAML; runs the full sweep instead of one scenario")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="seed (single run) or first seed (sweep)")
    p.add_argument("--mode", choices=("baseline", "lc", "paired"), default="paired")
    p.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_sweep(path: Path) -> SweepSpec:
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read sweep file {path}: {exc}") from exc
    return SweepSpec.from_dict(raw or {})


def _summary_row(m: ScenarioMetrics) -> dict:
    prec, rec = precision_recall(m.forecasts, m.lc_events)
    return {"mode": m.mode, "seed": m.seed, "config_hash": m.config_hash, "energy_J": m.energy_J,
            "travel_time_s": m.travel_time_s, "target_exited": m.target_exited,
            "lc_events": len(m.lc_events), "forecasts": len(m.forecasts), "precision": prec, "recall": rec,
            "collisions": m.collisions, "red_violations": m.red_violations, "fallbacks": m.fallbacks,
            "median_step_ms": 1000.0 * m.median_step_time}


SUMMARY_COLUMNS = ("mode", "seed", "config_hash", "energy_J", "travel_time_s", "target_exited", "lc_events",
                   "forecasts", "precision", "recall", "collisions", "red_violations", "fallbacks",
                   "median_step_ms")
TRAJ_COLUMNS = ("t", "position", "speed", "accel", "lane")
EVENT_COLUMNS = ("t", "vid", "lane_from", "lane_to", "position", "cell")


def _write_run(m: ScenarioMetrics, out: Path, header: str) -> None:
    tag = m.mode
    write_forecast_log(out / f"forecasts_{tag}.csv", m.forecasts, header)
    write_csv(out / f"lc_events_{tag}.csv",
              [{"t": e.t, "vid": e.vid, "lane_from": e.lane_from, "lane_to": e.lane_to,
                "position": e.position, "cell": e.cell} for e in m.lc_events], EVENT_COLUMNS, header)
    write_csv(out / f"trajectory_{tag}.csv",
              [dict(zip(TRAJ_COLUMNS, row[:5])) for row in m.trajectory], TRAJ_COLUMNS, header)


def run_single(cfg: ScenarioConfig, mode: str, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    modes = ("baseline", "lc") if mode == "paired" else (mode,)
    header = f"config_hash={cfg.config_hash()} seed={cfg.demand.seed}"
    runs = []
    failed = 0
    for md in modes:
        try:
            m = run_scenario(cfg.with_(mode=md))
        except Exception as exc:
            log.error("%s run failed: %s", md, exc)
            failed += 1
            continue
        runs.append(m)
        _write_run(m, out, header)
    write_csv(out / "summary.csv", [_summary_row(m) for m in runs], SUMMARY_COLUMNS, header)
    for m in runs:
        print(f"{m.mode:8s} energy {m.energy_J / 1000.0:9.1f} kJ  travel {m.travel_time_s} s  "
              f"lane changes {len(m.lc_events)}  forecasts {len(m.forecasts)}")
    if len(runs) == 2:
        res: PairedResult = paired_compare([runs[0]], [runs[1]])
        print(f"benefit {res.benefit_pct[0]:.2f} %  travel-time change {res.travel_increase_pct[0]:.2f} %")
    return EXIT_PARTIAL if failed else EXIT_OK


def run_sweep_cmd(cfg: ScenarioConfig, spec: SweepSpec, mode: str, workers: int, out: Path) -> int:
    if mode != "paired":
        spec = SweepSpec(spec.thresholds, spec.volumes, spec.mprs, spec.seeds, "single")
        cfg = cfg.with_(mode=mode)
    elif spec.mode != "paired":
        cfg = cfg.with_(mode="lc")
    result = run_sweep(spec, cfg, workers=workers)
    paths = write_sweep(result, out, cfg)
    for a in result.aggregates:
        bm = a["benefit_mean_pct"]
        print(f"threshold {a['threshold']:<5} volume {a['volume']:<7} mpr {a['mpr']:<4} runs {a['runs']:<3} "
              f"failed {a['failed']:<3} benefit {'' if bm is None else f'{bm:.2f} %'}")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_PARTIAL if result.failed else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
        if args.seed is not None:
            cfg = cfg.with_(demand={"seed": args.seed})
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        spec = load_sweep(args.sweep) if args.sweep else None
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if spec is not None:
        return run_sweep_cmd(cfg, spec, args.mode, args.workers, args.out)
    return run_single(cfg, args.mode, args.out)


if __name__ == "__main__":
    sys.exit(main())
