"""Ground-truth multi-lane micro-simulation with one controlled vehicle.

Each 0.5 s step:

1. every vehicle advances ``x += v dt`` with the speed chosen at the previous step;
2. red-light and collision checks;
3. vehicles past the end of the road leave;
4. lane changes (benefit memory, exact neighbours);
5. new speeds, front to back per lane (Krauss for drivers, plan plus a safety
   filter for the target);
6. queued departures enter at the upstream end.

Drivers use the Krauss safe speed on the gap minus their standstill distance, so a
follower can always stop behind a leader braking at its own rate.  The stop bar
acts as a stopped leader during red, and during yellow for vehicles that cannot
clear it before red.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import LcParams, ScenarioConfig, VehicleType, vehicle_types
from .controller import ControlDecision, TargetState, power_terms
from .lcpredict import EVAL_DT, benefit, safe_speed, update_memory
from .pipeline import Pipeline
from .pw import CellField
from .signal import GREEN, RED, YELLOW, SignalSchedule


class SimulationAbort(RuntimeError):
    """Invariant breach; carries a textual state dump."""


@dataclass
class VehicleState:
    vid: int
    vtype: VehicleType
    lane: int
    position: float  # front bumper
    speed: float
    depart: float
    rng: np.random.Generator | None = None
    accel: float = 0.0
    memory: dict[int, float] = field(default_factory=dict)
    entered: float | None = None

    @property
    def kind(self) -> str:
        return self.vtype.name

    @property
    def length(self) -> float:
        return self.vtype.length

    @property
    def rear(self) -> float:
        return self.position - self.vtype.length

    @property
    def connected(self) -> bool:
        return self.kind in ("CV", "target_CAV")

    @property
    def is_target(self) -> bool:
        return self.kind == "target_CAV"


# --- car following -------------------------------------------------------------

def krauss_safe_speed(gap_eff: float, v_leader: float, vt: VehicleType) -> float:
    tb = vt.headway * vt.max_decel
    rad = tb * tb + v_leader * v_leader + 2.0 * vt.max_decel * gap_eff
    return max(0.0, -tb + math.sqrt(max(rad, 0.0)))


def krauss_speed(v: float, vt: VehicleType, dt: float, gap_eff: float | None,
                 v_leader: float, u: float, v_cap: float = math.inf) -> float:
    """``min(v + a dt, v_safe, v_max)`` less a dawdle of ``imperfection * a_max * dt * u``."""
    v_des = min(v + vt.max_accel * dt, vt.v_max, v_cap)
    if gap_eff is not None:
        v_des = min(v_des, krauss_safe_speed(gap_eff, v_leader, vt))
    return max(0.0, v_des - vt.imperfection * vt.max_accel * dt * u)


def krauss_step(veh: VehicleState, leader: VehicleState | None, dt: float,
                u: float | None = None) -> tuple[float, float]:
    """Move ``veh`` with its current speed, then pick its next speed.

    ``leader`` must already be in its new state.  Returns ``(speed, position)``.
    """
    x_new = veh.position + veh.speed * dt
    if u is None:
        u = float(veh.rng.uniform()) if veh.rng is not None else 0.0
    gap = None if leader is None else leader.rear - x_new - veh.vtype.min_gap
    v_l = 0.0 if leader is None else leader.speed
    return krauss_speed(veh.speed, veh.vtype, dt, gap, v_l, u), x_new


# --- demand --------------------------------------------------------------------

@dataclass(frozen=True)
class Departure:
    time: float
    lane: int
    kind: str
    vid: int


def plan_departures(cfg: ScenarioConfig, horizon: float | None = None) -> list[Departure]:
    """Seeded departure list: per lane ``round(volume * window / 3600)`` uniform times.

    Connectivity is drawn per vehicle with probability ``mpr``; the last connected
    vehicle of the second lane becomes the target.  Slow vehicles join lane 0 every
    ``slow_vehicle_period`` seconds for the whole run.
    """
    d = cfg.demand
    lanes = cfg.network.lanes
    horizon = cfg.sim.t_max if horizon is None else horizon
    rng = np.random.default_rng([d.seed, 101])
    raw: list[tuple[float, int, str]] = []
    for lane in range(lanes):
        vol = d.volume_per_lane[min(lane, len(d.volume_per_lane) - 1)]
        n = int(round(vol * d.departure_window / 3600.0))
        times = np.sort(rng.uniform(0.0, d.departure_window, n))
        u = rng.uniform(size=n)
        raw.extend((float(t), lane, "CV" if ui < d.mpr else "HV") for t, ui in zip(times, u))
    t = d.slow_vehicle_offset
    while t < horizon:
        raw.append((t, 0, "slow_HV"))
        t += d.slow_vehicle_period
    if d.with_target:
        t_lane = min(1, lanes - 1)
        own = [i for i, r in enumerate(raw) if r[1] == t_lane and r[2] != "slow_HV"]
        cvs = [i for i in own if raw[i][2] == "CV"]
        pick = max(cvs or own, key=lambda i: raw[i][0]) if (cvs or own) else None
        if pick is None:
            raw.append((d.departure_window, t_lane, "target_CAV"))
        else:
            raw[pick] = (raw[pick][0], t_lane, "target_CAV")
    raw.sort(key=lambda r: (r[0], r[1]))
    return [Departure(t, lane, kind, i) for i, (t, lane, kind) in enumerate(raw)]


def spawn_demand(plan: Sequence[Departure], t: float, released: set[int]) -> list[Departure]:
    """Departures due at or before ``t`` that have not been released yet."""
    out = [dep for dep in plan if dep.time <= t + 1e-9 and dep.vid not in released]
    released.update(dep.vid for dep in out)
    return out


# --- lane changes --------------------------------------------------------------

def _neighbours(lane_vehicles: Sequence[VehicleState], x: float, skip: VehicleState | None = None):
    """(leader, follower) around front position ``x``; ``lane_vehicles`` sorted front first."""
    leader = follower = None
    for v in lane_vehicles:
        if v is skip:
            continue
        if v.position > x:
            leader = v
        else:
            follower = v
            break
    return leader, follower


def lc_gap_ok(veh: VehicleState, leader: VehicleState | None, follower: VehicleState | None,
              dt: float) -> bool:
    """Exact gap test: free length, both standstill gaps, both decelerations bounded."""
    vt = veh.vtype
    front_limit = leader.rear if leader is not None else math.inf
    back_limit = follower.position if follower is not None else -math.inf
    if front_limit - back_limit < vt.length + 2.0 * vt.min_gap - 1e-9:
        return False
    if leader is not None:
        g = leader.rear - veh.position - vt.min_gap
        if g < 0 or veh.speed - vt.max_decel * dt > krauss_safe_speed(g, leader.speed, vt) + 1e-9:
            return False
    if follower is not None:
        fv = follower.vtype
        g = veh.rear - follower.position - fv.min_gap
        if g < 0:
            return False
        if follower.speed - fv.max_decel * dt > krauss_safe_speed(g, veh.speed, fv) + 1e-9:
            return False
    return True


def _lc_safe_speed(veh: VehicleState, leader: VehicleState | None, p: LcParams) -> float:
    if leader is None:
        return p.v_max_lane
    return safe_speed(max(0.0, leader.rear - veh.position), leader.speed, p)


@dataclass(frozen=True)
class LcEvent:
    t: float
    vid: int
    lane_from: int
    lane_to: int
    position: float
    cell: int


def execute_lane_changes(lanes: list[list[VehicleState]], p: LcParams, threshold: float, t: float,
                         dt: float, dx: float) -> list[LcEvent]:
    """Benefit-memory lane changes with exact neighbour information (in place)."""
    events: list[LcEvent] = []
    order = sorted((v for lst in lanes for v in lst), key=lambda v: (-v.position, v.vid))
    for veh in order:
        if veh.is_target or veh.kind == "slow_HV":
            continue
        cur_leader, _ = _neighbours(lanes[veh.lane], veh.position, skip=veh)
        v_cur = _lc_safe_speed(veh, cur_leader, p)
        moved = False
        for lane_to in (veh.lane - 1, veh.lane + 1):
            if not 0 <= lane_to < len(lanes):
                continue
            lead, foll = _neighbours(lanes[lane_to], veh.position)
            b = benefit(_lc_safe_speed(veh, lead, p), v_cur, p.v_max_lane)
            veh.memory[lane_to] = update_memory(veh.memory.get(lane_to, 0.0), b)
            if moved or veh.memory[lane_to] < threshold or not lc_gap_ok(veh, lead, foll, dt):
                continue
            lane_from = veh.lane
            lanes[lane_from].remove(veh)
            veh.lane = lane_to
            lanes[lane_to].append(veh)
            lanes[lane_to].sort(key=lambda v: (-v.position, v.vid))
            veh.memory.clear()
            events.append(LcEvent(t, veh.vid, lane_from, lane_to, veh.position,
                                  int(math.floor(veh.position / dx))))
            moved = True
    return events


# --- truth fields --------------------------------------------------------------

def truth_field(lanes: Sequence[Sequence[VehicleState]], cells: int, dx: float, v_free: float,
                blocked: Iterable[LcEvent] = ()) -> CellField:
    """Cell densities from vehicle-length overlap; speeds are mass-weighted (free speed if empty).

    A lane change executed this step also occupies its cell in the lane it left.
    """
    n_lanes = len(lanes)
    mass = np.zeros((n_lanes, cells))
    mom = np.zeros((n_lanes, cells))

    def deposit(lane: int, front: float, length: float, speed: float) -> None:
        lo, hi = front - length, front
        for j in range(max(0, int(math.floor(lo / dx))), min(cells - 1, int(math.floor(hi / dx))) + 1):
            overlap = min(hi, (j + 1) * dx) - max(lo, j * dx)
            if overlap > 0:
                w = overlap / length
                mass[lane, j] += w
                mom[lane, j] += w * speed

    by_id = {}
    for lane, lst in enumerate(lanes):
        for v in lst:
            deposit(lane, v.position, v.length, v.speed)
            by_id[v.vid] = v
    for ev in blocked:
        v = by_id.get(ev.vid)
        if v is not None:
            deposit(ev.lane_from, v.position, v.length, v.speed)
    rho = mass / dx
    with np.errstate(invalid="ignore", divide="ignore"):
        speed = np.where(mass > 1e-12, mom / np.where(mass > 1e-12, mass, 1.0), v_free)
    return CellField(rho, speed)


# --- scenario ------------------------------------------------------------------

@dataclass
class ScenarioMetrics:
    seed: int
    mode: str
    config_hash: str
    energy_J: float = 0.0
    travel_time_s: float | None = None
    target_exited: bool = False
    lc_events: list[LcEvent] = field(default_factory=list)
    forecasts: list[tuple[float, object]] = field(default_factory=list)
    trajectory: list[tuple] = field(default_factory=list)
    control_log: list[tuple] = field(default_factory=list)
    estimates: list[tuple[float, CellField]] = field(default_factory=list)
    truths: list[tuple[float, CellField]] = field(default_factory=list)
    collisions: int = 0
    red_violations: int = 0
    target_red_violations: int = 0
    emergency_brakes: int = 0
    bound_breaches: int = 0
    solves: int = 0
    fallbacks: int = 0
    statuses: dict[str, int] = field(default_factory=dict)
    step_times: list[float] = field(default_factory=list)
    max_slack_s2: float = 0.0
    filter_overrides: int = 0
    vehicles_entered: int = 0
    vehicles_exited: int = 0
    clamp_events: int = 0

    @property
    def median_step_time(self) -> float:
        return float(np.median(self.step_times)) if self.step_times else 0.0


class World:
    """One seeded scenario in one arm."""

    def __init__(self, cfg: ScenarioConfig, plan: Sequence[Departure] | None = None):
        self.cfg = cfg
        net = cfg.network
        self.dt = cfg.sim.dt_sim
        self.dx = cfg.pw.dx
        self.cells = int(math.ceil(net.length / self.dx - 1e-9))
        self.length = net.length
        self.sig = SignalSchedule.from_spec(cfg.signal, net.signal_position)
        self.types = vehicle_types(cfg.sim.vehicle_profile, cfg.demand.slow_v_max)
        self.plan = list(plan) if plan is not None else plan_departures(cfg)
        self.released: set[int] = set()
        self.queues: list[list[Departure]] = [[] for _ in range(net.lanes)]
        self.lanes: list[list[VehicleState]] = [[] for _ in range(net.lanes)]
        self.t = 0.0
        self.step_index = 0
        self.pipeline = Pipeline(cfg, self.sig, self.cells, use_lc=cfg.mode == "lc",
                                 meas_rng=np.random.default_rng([cfg.demand.seed, 303]))
        self.metrics = ScenarioMetrics(cfg.demand.seed, cfg.mode, cfg.config_hash())
        self.target: VehicleState | None = None
        self.target_done = False
        self.plan_accels: list[float] = []
        self.last_decision: ControlDecision | None = None
        self._lc_this_step: list[LcEvent] = []

    # -- helpers
    def vehicles(self) -> list[VehicleState]:
        return [v for lst in self.lanes for v in lst]

    def _sort(self) -> None:
        for lst in self.lanes:
            lst.sort(key=lambda v: (-v.position, v.vid))

    def _dump(self, msg: str) -> str:
        rows = [f"t={self.t:.2f} {msg}"]
        for lane, lst in enumerate(self.lanes):
            rows.append(f" lane {lane}: " + ", ".join(
                f"{v.vid}:{v.kind}@{v.position:.2f}/{v.speed:.2f}" for v in lst))
        return "\n".join(rows)

    def _stop_line_active(self, veh: VehicleState, t: float) -> bool:
        """Whether the stop bar binds ``veh`` for the interval starting at ``t``."""
        if not self.sig.has_red or veh.position >= self.sig.position:
            return False
        phase = self.sig.phase_at(t)
        if phase == RED:
            return True
        if phase == YELLOW:
            t_red = self._next_red_start(t)
            return veh.position + veh.speed * (t_red - t) < self.sig.position
        return False

    def _next_red_start(self, t: float) -> float:
        k = t
        while self.sig.phase_at(k) != RED:
            k += self.dt
        return k

    # -- step phases
    def _move(self) -> None:
        t = self.t
        red = self.sig.has_red and self.sig.phase_at(t) == RED
        for veh in self.vehicles():
            x_old = veh.position
            veh.position = x_old + veh.speed * self.dt
            if red and x_old < self.sig.position <= veh.position:
                self.metrics.red_violations += 1
                if veh.is_target:
                    self.metrics.target_red_violations += 1
        self._sort()

    def _check_gaps(self) -> None:
        for lst in self.lanes:
            for lead, foll in zip(lst, lst[1:]):
                if lead.rear - foll.position < -1e-9:
                    self.metrics.collisions += 1
                    raise SimulationAbort(self._dump(
                        f"collision: {foll.vid} into {lead.vid} gap {lead.rear - foll.position:.3f}"))

    def _exit(self) -> None:
        for lst in self.lanes:
            for veh in [v for v in lst if v.position >= self.length]:
                lst.remove(veh)
                self.metrics.vehicles_exited += 1
                if veh.is_target:
                    self.metrics.travel_time_s = self.t + self.dt - veh.entered
                    self.metrics.target_exited = True
                    self.target = None
                    self.target_done = True

    def _update_speeds(self, t_next: float) -> None:
        m = self.metrics
        for lst in self.lanes:
            leader = None
            for veh in lst:
                vt = veh.vtype
                gap = None if leader is None else leader.rear - veh.position - vt.min_gap
                v_l = 0.0 if leader is None else leader.speed
                if self._stop_line_active(veh, t_next):
                    g_line = self.sig.position - veh.position - 0.01
                    if gap is None or g_line < gap:
                        gap, v_l = g_line, 0.0
                v_safe = math.inf if gap is None else krauss_safe_speed(gap, v_l, vt)
                if v_safe < veh.speed - vt.max_decel * self.dt - 1e-9:
                    m.emergency_brakes += 1
                if veh.is_target:
                    self._target_speed(veh, v_safe)
                else:
                    u = float(veh.rng.uniform())
                    v_new = krauss_speed(veh.speed, vt, self.dt, gap, v_l, u)
                    veh.accel = (v_new - veh.speed) / self.dt
                    veh.speed = v_new
                leader = veh

    def _target_speed(self, veh: VehicleState, v_safe_tau: float) -> None:
        c = self.cfg.control
        a_cmd = self.plan_accels.pop(0) if self.plan_accels else 0.0
        v_cmd = veh.speed + a_cmd * self.dt
        v_new = min(v_cmd, c.v_max, v_safe_tau)
        if v_new < v_cmd - 1e-12:
            self.metrics.filter_overrides += 1
        v_new = max(v_new, veh.speed + c.a_min * self.dt, c.v_min)
        a = (v_new - veh.speed) / self.dt
        if a < c.a_min - 1e-9 or a > c.a_max + 1e-9 or v_new > c.v_max + 1e-9 or v_new < -1e-9:
            self.metrics.bound_breaches += 1
        p = power_terms(np.array([veh.speed]), np.array([a]), self.cfg.dyn)[0]
        self.metrics.energy_J += max(float(p.sum()), 0.0) * self.dt
        self.metrics.trajectory.append((self.t, veh.position, veh.speed, a, veh.lane, *p))
        veh.accel = a
        veh.speed = v_new

    def _spawn(self, t: float) -> None:
        for dep in spawn_demand(self.plan, t, self.released):
            self.queues[dep.lane].append(dep)
        for lane, q in enumerate(self.queues):
            if not q:
                continue
            dep = q[0]
            vt = self.types[dep.kind]
            lst = self.lanes[lane]
            last = lst[-1] if lst else None
            v_in = min(vt.v_max, self.cfg.network.v_max)
            if last is not None:
                g = last.rear - 0.0 - vt.min_gap
                if g < 0:
                    continue
                v_in = min(v_in, krauss_safe_speed(g, last.speed, vt))
            q.pop(0)
            rng = None if dep.kind == "target_CAV" else np.random.default_rng([self.cfg.demand.seed, dep.vid, 7])
            veh = VehicleState(dep.vid, vt, lane, 0.0, v_in, dep.time, rng, entered=t)
            lst.append(veh)
            self.metrics.vehicles_entered += 1
            if veh.is_target:
                self.target = veh

    def _leader_of(self, veh: VehicleState) -> VehicleState | None:
        lead, _ = _neighbours(self.lanes[veh.lane], veh.position, skip=veh)
        if lead is not None and lead.position - veh.position > self.cfg.sim.sensor_range:
            return None
        return lead

    def _replan(self) -> None:
        tgt = self.target
        state = TargetState(tgt.position, tgt.speed, tgt.accel, self.t, tgt.lane)
        lead = self._leader_of(tgt)
        dec = self.pipeline.step_controller(self.t, self.vehicles(), tgt.vid, state,
                                            None if lead is None else lead.position,
                                            5.0 if lead is None else lead.length)
        self.last_decision = dec
        self.plan_accels = [float(a) for a in dec.accels]
        m = self.metrics
        m.solves += 1
        m.fallbacks += int(dec.result.fallback)
        m.statuses[dec.result.status] = m.statuses.get(dec.result.status, 0) + 1
        m.max_slack_s2 = max(m.max_slack_s2, float(np.max(dec.s2)))
        m.step_times.append(self.pipeline.step_times[-1])
        prob = dec.problem
        d_p = prob.traj.d_p[0] if prob.traj.present else float("nan")
        v = np.array([tgt.speed])
        pw_terms = power_terms(v, np.array([dec.accels[0]]), self.cfg.dyn)[0]
        m.control_log.append((round(self.t, 3), tgt.position, tgt.speed, float(dec.accels[0]), d_p,
                              prob.constraint_set, len(prob.stop_rows), len(prob.clear_rows),
                              float(dec.s1[0]), float(dec.s2[0]), dec.result.status,
                              int(dec.result.fallback), *map(float, pw_terms)))

    def step(self) -> None:
        t = self.t
        integer_time = abs(t - round(t / self.cfg.pw.dt_model) * self.cfg.pw.dt_model) < 1e-9
        if integer_time:
            out = self.pipeline.observe(t, self.vehicles(), None if self.target is None else self.target.vid)
            self.metrics.estimates.append((t, out.estimate.mean))
            self.metrics.truths.append((t, truth_field(self.lanes, self.cells, self.dx, self.cfg.pw.v0,
                                                       self._lc_this_step)))
            for f in out.forecasts:
                self.metrics.forecasts.append((t, f))
        if self.target is not None and (integer_time or not self.plan_accels):
            self._replan()
        self._move()
        self._check_gaps()
        self._exit()
        self._lc_this_step = execute_lane_changes(self.lanes, self.cfg.lc, self.cfg.sim.lc_threshold,
                                                  t + self.dt, self.dt, self.dx)
        self.metrics.lc_events.extend(self._lc_this_step)
        self._check_gaps()
        self._update_speeds(t + self.dt)
        self._spawn(t + self.dt)
        self.t = t + self.dt
        self.step_index += 1
        on_road = sum(len(lst) for lst in self.lanes)
        if self.metrics.vehicles_entered != self.metrics.vehicles_exited + on_road:
            raise SimulationAbort(self._dump("vehicle conservation violated"))

    def run(self) -> ScenarioMetrics:
        self._spawn(0.0)
        n_steps = int(round(self.cfg.sim.t_max / self.dt))
        for _ in range(n_steps):
            self.step()
            if self.target_done and self.cfg.sim.stop_after_target_exit:
                break
        m = self.metrics
        if self.target is not None and m.travel_time_s is None:
            m.travel_time_s = self.t - self.target.entered
        m.clamp_events = self.pipeline.estimate.clamp_events
        return m


def run_scenario(cfg: ScenarioConfig, plan: Sequence[Departure] | None = None) -> ScenarioMetrics:
    return World(cfg, plan).run()
