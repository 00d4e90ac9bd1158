"""Lane-change forecasting from estimated cell states and CV reports.

A vehicle's incentive to move to a neighbouring lane is the normalised difference of
the safe speeds it could hold in the two lanes.  Positive incentives accumulate in a
benefit memory; a non-positive incentive halves it.  A lane change is expected once
the accumulated value reaches the threshold and the target cell has room.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .config import LcParams, PwParams
from .estimator import CvReport
from .pw import CellField, LcInjection, cell_centres, interpolation_coords

# evaluation step of the benefit model; the ground-truth simulator uses the same step
EVAL_DT = 0.5
# cells either side of a known vehicle from which its estimated mass is removed
KNOWN_SPREAD_CELLS = 2


def safe_speed(gap: float | None, v_leader: float | None, p: LcParams,
               v_max: float | None = None) -> float:
    """Highest speed that still allows stopping behind the leader with deceleration ``b``.

    ``gap=None`` means no leader within range; the free-flow bound is returned.
    """
    vmax = p.v_max_lane if v_max is None else v_max
    if gap is None or v_leader is None:
        return vmax
    tb = p.reaction_tau * p.max_decel_b
    rad = tb * tb + v_leader * v_leader + 2.0 * p.max_decel_b * gap
    return min(vmax, max(0.0, -tb + math.sqrt(max(rad, 0.0))))


def benefit(v_safe_target: float, v_safe_current: float, v_max: float) -> float:
    return (v_safe_target - v_safe_current) / v_max


def update_memory(memory: float, b: float) -> float:
    return memory + b if b > 0 else memory / 2.0


def first_crossing(benefits: Sequence[float], threshold: float, memory: float = 0.0,
                   add_prior: bool = False, feasible: Sequence[bool] | None = None) -> int | None:
    """Index of the first step whose accumulated benefit reaches ``threshold``.

    Index 0 is the current instant.  Steps where ``feasible`` is False do not fire;
    accumulation continues through them (the change is postponed, not abandoned).
    """
    acc = memory if add_prior else 0.0
    for k, b in enumerate(benefits):
        acc = update_memory(acc, b)
        if acc >= threshold and (feasible is None or feasible[k]):
            return k
    return None


def max_gap_density(p: LcParams, dx: float) -> float:
    """Largest target-cell density that still leaves ``length + 2 min_gap`` free."""
    return (dx - (p.veh_length + 2.0 * p.min_gap)) / (dx * p.veh_length)


def gap_feasible(rho_target: float, p: LcParams, dx: float) -> bool:
    free = dx - rho_target * dx * p.veh_length
    return free >= p.veh_length + 2.0 * p.min_gap - 1e-9


@dataclass(frozen=True)
class LcForecast:
    lane_from: int
    lane_to: int
    cell: int
    time_offset: float
    position: float
    v_lc: float
    vehicle: Hashable = None

    def __post_init__(self) -> None:
        if self.lane_from == self.lane_to:
            raise ValueError("lane_from and lane_to must differ")
        if self.time_offset < 0:
            raise ValueError("time_offset must be >= 0")


@dataclass
class _Entry:
    memory: float
    last_update: float
    lane: int = 0


@dataclass
class BenefitLedger:
    """Benefit memory per (vehicle, target lane).

    Vehicles are CVs (keyed by id) or anonymous occupied cells.  Anonymous vehicles
    are carried forward at their last speed and re-identified with the nearest new
    occupied cell in the same lane, within one cell length.
    """

    dx: float = 15.0
    entries: dict[Hashable, _Entry] = field(default_factory=dict)
    _anon: dict[Hashable, tuple[int, float, float, float]] = field(default_factory=dict)
    _next_anon: int = 0

    def memory(self, key: Hashable) -> float:
        e = self.entries.get(key)
        return 0.0 if e is None else e.memory

    def observe(self, key: Hashable, b: float, t: float, lane: int = 0) -> float:
        """Apply the current benefit once per elapsed evaluation step since the last call."""
        e = self.entries.get(key)
        if e is None or e.lane != lane:
            e = self.entries[key] = _Entry(0.0, t - EVAL_DT, lane)
        n = max(1, min(4, int(round((t - e.last_update) / EVAL_DT))))
        for _ in range(n):
            e.memory = update_memory(e.memory, b)
        e.last_update = t
        return e.memory

    def match_anonymous(self, lanes: Sequence[int], positions: Sequence[float],
                        speeds: Sequence[float], t: float) -> list[Hashable]:
        pairs = []
        for i, (lane, x) in enumerate(zip(lanes, positions)):
            for k, (k_lane, k_x, k_v, k_t) in self._anon.items():
                if k_lane == lane:
                    d = abs(k_x + k_v * (t - k_t) - x)
                    if d <= self.dx:
                        pairs.append((d, i, k[1]))
        pairs.sort()
        keys: list[Hashable] = [None] * len(positions)
        used: set[int] = set()
        for _, i, n in pairs:
            if keys[i] is None and n not in used:
                keys[i] = ("anon", n)
                used.add(n)
        for i in range(len(keys)):
            if keys[i] is None:
                keys[i] = ("anon", self._next_anon)
                self._next_anon += 1
        gone = set(self._anon) - set(keys)
        self.entries = {k: e for k, e in self.entries.items()
                        if not (isinstance(k, tuple) and k[0] in gone)}
        self._anon = {k: (lane, x, v, t) for k, lane, x, v in zip(keys, lanes, positions, speeds)}
        return keys


@dataclass
class _Track:
    key: Hashable
    lane: int
    x: float
    v: float
    report: CvReport | None = None


def _cell_of(x: float, dx: float, cells: int) -> int:
    return min(cells - 1, max(0, int(math.floor(x / dx))))


def _tracks(fld: CellField, reports: Sequence[CvReport], p: LcParams, dx: float) -> list[_Track]:
    """Reporting CVs, their reported leaders, and anonymous vehicles from the density field.

    Known vehicles remove one vehicle of mass from the cells nearest to them, and cells
    inside a measured gap are emptied.  Walking downstream, an anonymous vehicle is placed
    whenever the accumulated remaining mass reaches ``occupancy_fraction`` (each placement
    uses up one vehicle of mass); vehicles placed in the same cell are spaced evenly with
    the last one at its front edge.
    """
    cells = fld.cells_per_lane
    tracks = [_Track(("cv", r.vid), r.lane, r.position, r.speed, r) for r in reports]
    known = {(r.lane, r.position) for r in reports}
    for r in reports:
        if r.leader_gap is None:
            continue
        x = r.position + r.leader_gap + p.veh_length
        if any(lane == r.lane and abs(x - xk) < p.veh_length for lane, xk in known):
            continue
        known.add((r.lane, x))
        tracks.append(_Track(("lead", r.vid), r.lane, x, float(r.leader_speed)))
    for lane in range(fld.lanes):
        mass = fld.rho[lane] * dx
        centres = cell_centres(cells, dx)
        for kl, xk in known:
            if kl != lane:
                continue
            # the estimate spreads a vehicle over neighbouring cells; take one vehicle's
            # worth of mass from the nearest cells
            mid = xk - 0.5 * p.veh_length
            need = 1.0
            for j in np.argsort(np.abs(centres - mid), kind="stable")[:2 * KNOWN_SPREAD_CELLS + 1]:
                take = min(need, mass[j])
                mass[j] -= take
                need -= take
                if need <= 1e-12:
                    break
        # a measured gap proves the cells strictly inside it are empty
        for r in reports:
            if r.lane == lane and r.leader_gap is not None:
                lo = int(math.ceil(r.position / dx - 1e-9))
                hi = int(math.floor((r.position + r.leader_gap) / dx + 1e-9))
                mass[max(lo, 0):max(min(hi, cells), 0)] = 0.0
        # residual mass is counted cumulatively along the lane, so mass smeared over
        # several cells yields one vehicle rather than one per cell
        carry = 0.0
        for jj in range(cells):
            carry += mass[jj]
            count = 0
            while carry >= p.occupancy_fraction - 1e-9:
                carry -= 1.0
                count += 1
            for q in range(count):
                x = (jj + (q + 1.0) / count) * dx
                tracks.append(_Track(None, lane, float(min(x, cells * dx - 1e-6)), float(fld.v[lane, jj])))
    return tracks


def _lane_index(xs: np.ndarray, vs: np.ndarray, lane_of: np.ndarray, lanes: int):
    """Per lane: track indices sorted by position, with positions and speeds."""
    out = []
    for lane in range(lanes):
        idx = np.nonzero(lane_of == lane)[0]
        order = idx[np.argsort(xs[idx], kind="stable")]
        out.append((order, xs[order], vs[order]))
    return out


def _layout_ok(index, lane: int, x: float, v: float, p: LcParams) -> bool:
    """Room for the changer between its would-be leader and follower tracks.

    Besides the standstill gaps, the changer must be able to slow to its safe speed
    behind the leader within one evaluation step, and so must the new follower.
    """
    _, xl, vl = index[lane]
    n = int(np.searchsorted(xl, x, side="right"))
    step = p.max_decel_b * EVAL_DT
    if n < len(xl):
        g = float(xl[n]) - p.veh_length - x - p.min_gap
        if g < -1e-9 or v - step > safe_speed(max(g, 0.0), float(vl[n]), p) + 1e-9:
            return False
    if n > 0:
        g = x - p.veh_length - float(xl[n - 1]) - p.min_gap
        if g < -1e-9 or float(vl[n - 1]) - step > safe_speed(max(g, 0.0), v, p) + 1e-9:
            return False
    return True


def _leader_safe_speed(index, lane: int, x: float, scan: float, p: LcParams) -> float:
    _, xl, vl = index[lane]
    n = int(np.searchsorted(xl, x, side="right"))
    if n >= len(xl) or xl[n] - x > scan:
        return p.v_max_lane
    return safe_speed(max(0.0, float(xl[n]) - p.veh_length - x), float(vl[n]), p)


def forecast_lc(fields: Sequence[CellField], reports: Sequence[CvReport], p: LcParams,
                pw: PwParams, ledger: BenefitLedger | None = None, t_now: float = 0.0,
                exclude: Iterable[int] = ()) -> list[LcForecast]:
    """Forecast lane changes within ``p.horizon_s`` from predicted fields.

    ``fields[m]`` is the predicted state ``m`` model steps ahead (``fields[0]`` = now).
    Vehicles are the reporting CVs, their reported leaders, and anonymous vehicles
    recovered from the density field; all move with the predicted speed field.  CV ids in ``exclude``
    are treated as obstacles only (they never change lanes).
    """
    if not fields:
        return []
    dx = pw.dx
    cells, lanes = fields[0].cells_per_lane, fields[0].lanes
    excluded = set(exclude)
    tracks = _tracks(fields[0], reports, p, dx)
    anon = [tr for tr in tracks if tr.key is None]
    if ledger is not None:
        keys = ledger.match_anonymous([t.lane for t in anon], [t.x for t in anon],
                                      [t.v for t in anon], t_now)
    else:
        keys = [("anon", i) for i in range(len(anon))]
    for tr, key in zip(anon, keys):
        tr.key = key
    if not tracks:
        return []
    n_steps = int(math.floor(p.horizon_s / EVAL_DT + 1e-9))
    scan = p.leader_scan_cells * dx

    def field_at(k: int) -> CellField:
        return fields[min(len(fields) - 1, int(math.floor(k * EVAL_DT / pw.dt_model + 1e-9)))]

    lane_of = np.array([tr.lane for tr in tracks])
    xs = np.empty((n_steps + 1, len(tracks)))
    vs = np.empty_like(xs)
    xs[0] = [tr.x for tr in tracks]
    vs[0] = [tr.v for tr in tracks]
    for k in range(n_steps):
        fld = field_at(k)
        xs[k + 1] = xs[k] + vs[k] * EVAL_DT
        j, lam = interpolation_coords(xs[k + 1], dx, cells)
        vs[k + 1] = lam * fld.v[lane_of, j + 1] + (1.0 - lam) * fld.v[lane_of, j]
    index = [_lane_index(xs[k], vs[k], lane_of, lanes) for k in range(n_steps + 1)]

    road_end = cells * dx
    forecasts: list[LcForecast] = []
    for i, tr in enumerate(tracks):
        if tr.report is not None and tr.report.vid in excluded:
            continue
        for lane_to in (tr.lane - 1, tr.lane + 1):
            if not 0 <= lane_to < lanes:
                continue
            bs, feas = [], []
            for k in range(n_steps + 1):
                x = float(xs[k, i])
                if x >= road_end:
                    break
                if k == 0 and tr.report is not None and tr.report.leader_gap is not None:
                    v_cur = safe_speed(tr.report.leader_gap, tr.report.leader_speed, p)
                else:
                    v_cur = _leader_safe_speed(index[k], tr.lane, x, scan, p)
                v_tgt = _leader_safe_speed(index[k], lane_to, x, scan, p)
                bs.append(benefit(v_tgt, v_cur, p.v_max_lane))
                feas.append(gap_feasible(float(field_at(k).rho[lane_to, _cell_of(x, dx, cells)]), p, dx)
                            and _layout_ok(index[k], lane_to, x, float(vs[k, i]), p))
            if not bs:
                continue
            prior = 0.0
            if ledger is not None:
                prior = ledger.memory((tr.key, lane_to))
                ledger.observe((tr.key, lane_to), bs[0], t_now, tr.lane)
            k = first_crossing(bs, p.threshold, prior, p.add_prior_memory, feas)
            if k is None:
                continue
            x = float(xs[k, i])
            forecasts.append(LcForecast(tr.lane, lane_to, _cell_of(x, dx, cells), k * EVAL_DT, x,
                                        float(vs[k, i]), tr.key))
    return _one_per_cell_step(forecasts, pw)


def is_identified(f: LcForecast) -> bool:
    """True for a reporting CV or a leader it measured, False for density-derived tracks."""
    return isinstance(f.vehicle, tuple) and f.vehicle[0] in ("cv", "lead")


def _one_per_cell_step(forecasts: list[LcForecast], pw: PwParams) -> list[LcForecast]:
    forecasts = sorted(forecasts, key=lambda f: (f.time_offset, f.lane_from, f.cell, f.lane_to))
    taken: set[tuple[int, int, int]] = set()
    vehicles: set[Hashable] = set()
    out = []
    for f in forecasts:
        step = int(math.floor(f.time_offset / pw.dt_model + 1e-9))
        slots = {(f.lane_from, f.cell, step), (f.lane_to, f.cell, step)}
        if slots & taken or (f.vehicle is not None and f.vehicle in vehicles):
            continue
        taken |= slots
        if f.vehicle is not None:
            vehicles.add(f.vehicle)
        out.append(f)
    return out


def lc_alpha(p: LcParams, pw: PwParams) -> float:
    return min(1.0, pw.dt_model / p.lc_duration_s)


def injections_from_forecasts(forecasts: Sequence[LcForecast], p: LcParams, pw: PwParams,
                              horizon_steps: int) -> list[list[LcInjection]]:
    """Per model step, paired ``-alpha/dx`` (source) and ``+alpha/dx`` (target) injections."""
    alpha = lc_alpha(p, pw)
    out: list[list[LcInjection]] = [[] for _ in range(horizon_steps)]
    for f in forecasts:
        step = int(math.floor(f.time_offset / pw.dt_model + 1e-9))
        if not 0 <= step < horizon_steps:
            raise ValueError(f"forecast at +{f.time_offset}s lies outside the {horizon_steps}-step horizon")
        mag = alpha / pw.dx
        out[step].append(LcInjection(f.cell, f.lane_from, -mag, f.v_lc))
        out[step].append(LcInjection(f.cell, f.lane_to, mag, f.v_lc))
    return out


FORECAST_COLUMNS = ("time", "lane_from", "lane_to", "cell", "offset")


def write_forecast_log(path: str | Path, rows: Iterable[tuple[float, LcForecast]],
                       header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(FORECAST_COLUMNS)
        for t, f in rows:
            w.writerow((f"{t:.3f}", f.lane_from, f.lane_to, f.cell, f"{f.time_offset:.3f}"))
