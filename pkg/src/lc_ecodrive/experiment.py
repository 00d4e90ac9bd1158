"""Error metrics, paired comparisons and seeded sweeps.

Report rows contain only quantities that are a pure function of (config, seed);
wall-clock timings go to a separate file so the main CSVs are byte-stable.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .config import ConfigError, ScenarioConfig
from .lcpredict import LcForecast
from .microsim import LcEvent, ScenarioMetrics, run_scenario
from .pw import Boundary, CellField, LcInjection, propagate
from .signal import SignalSchedule

log = logging.getLogger(__name__)


# --- error metrics ---------------------------------------------------------------

def _stack(fields: CellField | Sequence[CellField], attr: str) -> np.ndarray:
    if isinstance(fields, CellField):
        fields = [fields]
    return np.stack([np.asarray(getattr(f, attr), dtype=float) for f in fields])


def _select(err: np.ndarray, cells: slice | Sequence[int] | None, mask: np.ndarray | None) -> np.ndarray:
    if cells is not None:
        err = err[..., cells]
        if mask is not None:
            mask = np.asarray(mask)[..., cells]
    if mask is not None:
        err = err[np.broadcast_to(mask, err.shape)]
    err = np.ravel(err)
    if err.size == 0:
        raise ValueError("RMSE over an empty cell range")
    return err


def rmse_speed(pred: CellField | Sequence[CellField], truth: CellField | Sequence[CellField],
               cells: slice | Sequence[int] | None = None, mask: np.ndarray | None = None) -> float:
    """Speed RMSE (m/s) over every (snapshot, lane, cell) entry selected.

    ``cells`` picks columns; ``mask`` (broadcastable to ``(snapshots, lanes, cells)``)
    picks individual entries.
    """
    err = _stack(pred, "v") - _stack(truth, "v")
    return float(np.sqrt(np.mean(_select(err, cells, mask) ** 2)))


def rmse_density(pred: CellField | Sequence[CellField], truth: CellField | Sequence[CellField],
                 dx: float, cells: slice | Sequence[int] | None = None,
                 mask: np.ndarray | None = None) -> float:
    """Density RMSE in vehicles per cell."""
    err = (_stack(pred, "rho") - _stack(truth, "rho")) * dx
    return float(np.sqrt(np.mean(_select(err, cells, mask) ** 2)))


def occupied_mask(truth: Sequence[CellField]) -> np.ndarray:
    """Entries where the true cell holds some vehicle (speed is defined there)."""
    return _stack(truth, "rho") > 0


def target_range_mask(metrics: ScenarioMetrics, cells: int, dx: float, reach: float) -> np.ndarray:
    """Per recorded snapshot, the cells from the target's position to ``reach`` metres ahead.

    Before the target enters, or after it leaves, no cell is selected.
    """
    traj = {round(row[0], 6): row[1] for row in metrics.trajectory}
    n_lanes = metrics.truths[0][1].lanes if metrics.truths else 1
    mask = np.zeros((len(metrics.truths), n_lanes, cells), dtype=bool)
    centres = (np.arange(cells) + 0.5) * dx
    for i, (t, _) in enumerate(metrics.truths):
        x = traj.get(round(t, 6))
        if x is not None:
            mask[i, :, (centres >= x) & (centres <= x + reach)] = True
    return mask


def estimation_rmse(metrics: ScenarioMetrics, dx: float, mask: np.ndarray | None = None,
                    occupied_only: bool = True) -> tuple[float, float]:
    """(speed m/s, density veh/cell) RMSE of the filter's posterior against the truth.

    With ``occupied_only`` the speed error is taken over cells that hold a vehicle.
    """
    est = [e for _, e in metrics.estimates]
    tru = [t for _, t in metrics.truths]
    base = np.ones((len(tru),) + np.shape(tru[0].rho), dtype=bool) if mask is None else mask
    speed_mask = base & occupied_mask(tru) if occupied_only else base
    return rmse_speed(est, tru, mask=speed_mask), rmse_density(est, tru, dx, mask=base)


# --- lane-change prediction with known events ------------------------------------------

def _event_injections(events: Iterable[LcEvent], truth: CellField, t0: float, steps: int,
                      alpha: float, dx: float, dt_model: float) -> list[list[LcInjection]]:
    out: list[list[LcInjection]] = [[] for _ in range(steps)]
    for ev in events:
        k = int(math.ceil((ev.t - t0) / dt_model - 1e-9)) - 1
        if 0 <= k < steps:
            v_lc = float(truth.v[ev.lane_from, ev.cell])
            out[k].append(LcInjection(ev.cell, ev.lane_from, -alpha / dx, v_lc))
            out[k].append(LcInjection(ev.cell, ev.lane_to, alpha / dx, v_lc))
    return out


def known_lc_prediction_rmse(metrics: ScenarioMetrics, cfg: ScenarioConfig,
                             horizon_steps: int = 5) -> tuple[float, float, int]:
    """Density RMSE (veh/cell) on lane-change cells, with and without LC injections.

    Each recorded truth snapshot is propagated ``horizon_steps`` ahead twice: once with
    the lane changes that actually happened in that window injected, once without.
    Errors are taken at the event cell in both lanes, from the step after the change
    to the end of the window.  Returns ``(modified, standard, n_entries)``.
    """
    p = cfg.pw
    truths = metrics.truths
    times = [t for t, _ in truths]
    index = {round(t, 6): i for i, t in enumerate(times)}
    sig = SignalSchedule.from_spec(cfg.signal, cfg.network.signal_position)
    alpha = min(1.0, p.dt_model / cfg.lc.lc_duration_s)
    vols = cfg.demand.volume_per_lane
    err_mod: list[float] = []
    err_std: list[float] = []
    for i, (t0, start) in enumerate(truths):
        window = [e for e in metrics.lc_events if t0 < e.t <= t0 + horizon_steps * p.dt_model + 1e-9]
        if not window:
            continue
        inflow = tuple((vols[min(l, len(vols) - 1)] if t0 <= cfg.demand.departure_window else 0.0) / 3600.0
                       for l in range(start.lanes))
        bnd = Boundary("open", inflow)
        inj = _event_injections(window, start, t0, horizon_steps, alpha, p.dx, p.dt_model)
        with_lc = propagate(start, inj, sig, horizon_steps, p, t0, bnd)
        without = propagate(start, None, sig, horizon_steps, p, t0, bnd)
        for ev in window:
            k0 = int(math.ceil((ev.t - t0) / p.dt_model - 1e-9))
            for k in range(k0, horizon_steps + 1):
                j = index.get(round(t0 + k * p.dt_model, 6))
                if j is None:
                    continue
                truth = truths[j][1]
                for lane in (ev.lane_from, ev.lane_to):
                    err_mod.append((with_lc[k].rho[lane, ev.cell] - truth.rho[lane, ev.cell]) * p.dx)
                    err_std.append((without[k].rho[lane, ev.cell] - truth.rho[lane, ev.cell]) * p.dx)
    if not err_mod:
        raise ValueError("no lane changes fall inside any prediction window")
    rm = float(np.sqrt(np.mean(np.square(err_mod))))
    rs = float(np.sqrt(np.mean(np.square(err_std))))
    return rm, rs, len(err_mod)


# --- forecasts vs events -----------------------------------------------------------

def forecast_matches(t: float, f: LcForecast, ev: LcEvent, cell_tol: int = 1,
                     time_tol: float = 1.0) -> bool:
    return (f.lane_from == ev.lane_from and f.lane_to == ev.lane_to
            and abs(f.cell - ev.cell) <= cell_tol
            and abs(ev.t - (t + f.time_offset)) <= time_tol + 1e-9)


def precision_recall(forecasts: Sequence[tuple[float, LcForecast]], events: Sequence[LcEvent],
                     cell_tol: int = 1, time_tol: float = 1.0) -> tuple[float, float]:
    """Share of forecasts matching some event, and share of events matched by some forecast.

    Vacuous cases (no forecasts, no events) score 1.
    """
    hits = sum(any(forecast_matches(t, f, e, cell_tol, time_tol) for e in events) for t, f in forecasts)
    found = sum(any(forecast_matches(t, f, e, cell_tol, time_tol) for t, f in forecasts) for e in events)
    precision = hits / len(forecasts) if forecasts else 1.0
    recall = found / len(events) if events else 1.0
    return precision, recall


# --- paired comparison ---------------------------------------------------------------

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("no values")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def energy_benefit_pct(e_base: float, e_lc: float) -> float:
    return 100.0 * (e_base - e_lc) / e_base


@dataclass(frozen=True)
class PairedResult:
    seeds: tuple[int, ...]
    benefit_pct: tuple[float, ...]
    travel_increase_pct: tuple[float, ...]

    @property
    def mean_benefit(self) -> float:
        return mean_std(self.benefit_pct)[0]

    @property
    def std_benefit(self) -> float:
        return mean_std(self.benefit_pct)[1]

    @property
    def mean_travel_increase(self) -> float:
        return mean_std(self.travel_increase_pct)[0]


def paired_compare(baseline: Sequence[ScenarioMetrics], lc: Sequence[ScenarioMetrics]) -> PairedResult:
    """Per-seed energy benefit and travel-time change of the LC arm over the baseline."""
    if len(baseline) != len(lc):
        raise ValueError(f"arm size mismatch: {len(baseline)} baseline vs {len(lc)} lc runs")
    seeds, ben, tti = [], [], []
    for b, l in zip(baseline, lc):
        if b.seed != l.seed:
            raise ValueError(f"unpaired seeds {b.seed} and {l.seed}")
        seeds.append(b.seed)
        ben.append(energy_benefit_pct(b.energy_J, l.energy_J))
        if b.travel_time_s and l.travel_time_s is not None:
            tti.append(100.0 * (l.travel_time_s - b.travel_time_s) / b.travel_time_s)
        else:
            tti.append(float("nan"))
    return PairedResult(tuple(seeds), tuple(ben), tuple(tti))


def run_paired(cfg: ScenarioConfig, seeds: Iterable[int]) -> tuple[list[ScenarioMetrics], list[ScenarioMetrics]]:
    base, lc = [], []
    for s in seeds:
        c = cfg.with_(demand={"seed": s})
        base.append(run_scenario(c.with_(mode="baseline")))
        lc.append(run_scenario(c.with_(mode="lc")))
    return base, lc


# --- sweeps ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    thresholds: tuple[float, ...] = (2.5,)
    volumes: tuple[float, ...] = (1300.0,)
    mprs: tuple[float, ...] = (0.7,)
    seeds: int = 20
    mode: str = "paired"  # "paired" | "single"

    def __post_init__(self) -> None:
        for name in ("thresholds", "volumes", "mprs"):
            if not getattr(self, name):
                raise ConfigError(f"sweep.{name} must be nonempty")
        if self.seeds < 1:
            raise ConfigError("sweep.seeds must be >= 1")
        if self.mode not in ("paired", "single"):
            raise ConfigError(f"sweep.mode must be 'paired' or 'single', got {self.mode!r}")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SweepSpec":
        if not isinstance(raw, dict):
            raise ConfigError("sweep file must contain a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        vals = dict(raw)
        for name in ("thresholds", "volumes", "mprs"):
            if name in vals:
                v = vals[name]
                vals[name] = tuple(float(x) for x in (v if isinstance(v, (list, tuple)) else [v]))
        try:
            return cls(**vals)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def cells(self, seed_base: int = 0) -> list[tuple[float, float, float, int]]:
        return [(th, vol, mpr, seed_base + s) for th, vol, mpr, s in
                itertools.product(self.thresholds, self.volumes, self.mprs, range(self.seeds))]


ROW_COLUMNS = ("threshold", "volume", "mpr", "seed", "status", "energy_base_J", "energy_lc_J",
               "benefit_pct", "travel_base_s", "travel_lc_s", "travel_increase_pct", "forecasts",
               "precision", "recall", "lc_events", "rmse_speed", "rmse_density", "collisions",
               "red_violations", "fallbacks", "error")
AGG_COLUMNS = ("threshold", "volume", "mpr", "runs", "failed", "benefit_mean_pct", "benefit_std_pct",
               "travel_increase_mean_pct", "precision_mean", "recall_mean", "rmse_speed_mean",
               "rmse_density_mean")
TIMING_COLUMNS = ("threshold", "volume", "mpr", "seed", "median_step_ms")


def cell_config(base: ScenarioConfig, threshold: float, volume: float, mpr: float,
                seed: int) -> ScenarioConfig:
    lanes = base.network.lanes
    return base.with_(lc={"threshold": threshold},
                      demand={"volume_per_lane": (volume,) * lanes, "mpr": mpr, "seed": seed})


def _scenario_row(m: ScenarioMetrics, cfg: ScenarioConfig) -> dict[str, Any]:
    prec, rec = precision_recall(m.forecasts, m.lc_events)
    mask = target_range_mask(m, m.truths[0][1].cells_per_lane, cfg.pw.dx, cfg.control.spat_range) \
        if m.truths else None
    try:
        rs, rd = estimation_rmse(m, cfg.pw.dx, mask)
    except ValueError:
        rs = rd = float("nan")
    return {"forecasts": len(m.forecasts), "precision": prec, "recall": rec, "lc_events": len(m.lc_events),
            "rmse_speed": rs, "rmse_density": rd, "collisions": m.collisions,
            "red_violations": m.red_violations, "fallbacks": m.fallbacks}


def run_cell(args: tuple[ScenarioConfig, str, float, float, float, int]) -> tuple[dict[str, Any], float]:
    """One sweep cell; never raises.  Returns the report row and the median step time (s)."""
    base, mode, th, vol, mpr, seed = args
    row: dict[str, Any] = {"threshold": th, "volume": vol, "mpr": mpr, "seed": seed, "status": "ok",
                           "error": ""}
    step = float("nan")
    try:
        cfg = cell_config(base, th, vol, mpr, seed)
        if mode == "paired":
            mb = run_scenario(cfg.with_(mode="baseline"))
            ml = run_scenario(cfg.with_(mode="lc"))
            row.update(energy_base_J=mb.energy_J, energy_lc_J=ml.energy_J,
                       benefit_pct=energy_benefit_pct(mb.energy_J, ml.energy_J),
                       travel_base_s=mb.travel_time_s, travel_lc_s=ml.travel_time_s)
            if mb.travel_time_s and ml.travel_time_s is not None:
                row["travel_increase_pct"] = 100.0 * (ml.travel_time_s - mb.travel_time_s) / mb.travel_time_s
            row.update(_scenario_row(ml, cfg))
            row["collisions"] += mb.collisions
            row["red_violations"] += mb.red_violations
            row["fallbacks"] += mb.fallbacks
            step = ml.median_step_time
        else:
            m = run_scenario(cfg)
            key = "lc" if cfg.mode == "lc" else "base"
            row[f"energy_{key}_J"] = m.energy_J
            row[f"travel_{key}_s"] = m.travel_time_s
            row.update(_scenario_row(m, cfg))
            step = m.median_step_time
    except Exception as exc:  # a failed cell is reported, the sweep carries on
        log.error("sweep cell threshold=%s volume=%s mpr=%s seed=%s failed: %s", th, vol, mpr, seed, exc)
        row["status"] = "error"
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")[:300]
    return row, step


def aggregate(rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """One summary row per (threshold, volume, mpr), computed only from ``rows``."""
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for r in rows:
        groups.setdefault((r["threshold"], r["volume"], r["mpr"]), []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        ok = [r for r in rs if r["status"] == "ok"]

        def col(name: str) -> list[float]:
            return [float(r[name]) for r in ok if r.get(name) is not None and not
                    (isinstance(r[name], float) and math.isnan(r[name]))]

        def mean_of(name: str) -> float | None:
            vals = col(name)
            return float(np.mean(vals)) if vals else None

        ben = col("benefit_pct")
        bm, bs = mean_std(ben) if ben else (None, None)
        out.append({"threshold": key[0], "volume": key[1], "mpr": key[2], "runs": len(rs),
                    "failed": len(rs) - len(ok), "benefit_mean_pct": bm, "benefit_std_pct": bs,
                    "travel_increase_mean_pct": mean_of("travel_increase_pct"),
                    "precision_mean": mean_of("precision"), "recall_mean": mean_of("recall"),
                    "rmse_speed_mean": mean_of("rmse_speed"), "rmse_density_mean": mean_of("rmse_density")})
    return out


@dataclass
class SweepResult:
    rows: list[dict[str, Any]]
    aggregates: list[dict[str, Any]]
    timings: list[dict[str, Any]]

    @property
    def failed(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)


def run_sweep(spec: SweepSpec, base: ScenarioConfig, workers: int = 1) -> SweepResult:
    """Run every sweep cell (in a process pool when ``workers > 1``) and merge by key."""
    mode = spec.mode
    jobs = [(base, mode, th, vol, mpr, seed) for th, vol, mpr, seed in spec.cells(base.demand.seed)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, jobs))
    else:
        results = [run_cell(j) for j in jobs]
    key = lambda r: (r[0]["threshold"], r[0]["volume"], r[0]["mpr"], r[0]["seed"])
    results.sort(key=key)
    rows = [r for r, _ in results]
    timings = [{"threshold": r["threshold"], "volume": r["volume"], "mpr": r["mpr"], "seed": r["seed"],
                "median_step_ms": 1000.0 * s} for r, s in results]
    return SweepResult(rows, aggregate(rows), timings)


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: str | Path, rows: Sequence[dict[str, Any]], columns: Sequence[str],
              header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_sweep(result: SweepResult, out_dir: str | Path, base: ScenarioConfig) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"config_hash={base.config_hash()} seed_base={base.demand.seed}"
    paths = [out / "rows.csv", out / "aggregate.csv", out / "timing.csv"]
    write_csv(paths[0], result.rows, ROW_COLUMNS, header)
    write_csv(paths[1], result.aggregates, AGG_COLUMNS, header)
    write_csv(paths[2], result.timings, TIMING_COLUMNS, header)
    return paths
