"""Receding-horizon energy-optimal speed control of the target CAV.

Decision vector ``z = [a_0..a_{N-1}, s1_0..s1_{N-1}, s2_0..s2_{N-1}]``.  Speeds and
positions follow the drop-the-quadratic-term kinematics ``v+ = v + a dt`` and
``x+ = x + v dt``, so every constraint is linear in ``z``.  The cubic drag term is
linearised about the previous iterate's speed profile; the resulting convex QP is
solved with SLSQP and re-linearised until the speed profile settles.

Slack ``s1[k-1]`` / ``s2[k-1]`` relax the maximum / minimum spacing rows at step ``k``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize, nnls

from .config import ControlConfig, PwParams, VehicleDynParams
from .lcpredict import LcForecast
from .pw import CellField, interpolation_coords
from .signal import SignalSchedule

STOP_MARGIN = 0.05  # m kept before the stop bar at red instants
OPTIMAL, MAX_ITER, INFEASIBLE = "optimal", "max_iter", "infeasible"


@dataclass(frozen=True)
class TargetState:
    position: float  # front bumper, m from segment start
    speed: float
    accel: float  # last applied acceleration
    t: float
    lane: int = 0


@dataclass(frozen=True)
class PrecedingTrajectory:
    d_p: np.ndarray  # rear bumper of the preceding vehicle at t_now + k dt, k = 0..N
    sigma: np.ndarray
    present: bool
    switch_step: int | None = None

    @classmethod
    def absent(cls, n: int) -> "PrecedingTrajectory":
        return cls(np.full(n + 1, np.inf), np.zeros(n + 1), False)


def rollout_dynamics(a: Sequence[float], v0: float, x0: float, dt: float):
    a = np.asarray(a, dtype=float)
    v = np.empty(a.size + 1)
    x = np.empty(a.size + 1)
    v[0], x[0] = v0, x0
    for k in range(a.size):
        v[k + 1] = v[k] + a[k] * dt
        x[k + 1] = x[k] + v[k] * dt
    return v, x


def _field_speed(fld: CellField, lane: int, x: float, dx: float) -> float:
    j, lam = interpolation_coords(x, dx, fld.cells_per_lane)
    j, lam = int(j), float(lam)
    return float(lam * fld.v[lane, j + 1] + (1.0 - lam) * fld.v[lane, j])


def _advance(fields: Sequence[CellField], lane: int, x0: float, t_start: float, times: np.ndarray,
             pw: PwParams, sig: SignalSchedule | None, t_now: float) -> np.ndarray:
    """Front position at each of ``times`` (offsets from now, all >= t_start)."""
    out = np.empty(times.size)
    x, t = x0, t_start
    stop = sig.position if sig is not None and sig.has_red else math.inf
    for i, t_target in enumerate(times):
        while t < t_target - 1e-9:
            h = min(t_target - t, 0.5)
            m = min(len(fields) - 1, int(math.floor(t / pw.dt_model + 1e-9)))
            x_new = x + _field_speed(fields[m], lane, x, pw.dx) * h
            if x <= stop and sig is not None and sig.has_red and sig.is_red(t_now + t):
                x_new = min(x_new, stop)
            x, t = x_new, t + h
        out[i] = x
    return out


def _sigma_along(path: np.ndarray, lane: int, speed_std: np.ndarray | None, dt: float, dx: float,
                 cfg: ControlConfig, start: float = 0.0) -> np.ndarray:
    if speed_std is None:
        return np.full(path.size, cfg.sigma_dp_fallback)
    cells = speed_std.shape[-1]
    j, lam = interpolation_coords(path, dx, cells)
    std = lam * speed_std[lane, j + 1] + (1.0 - lam) * speed_std[lane, j]
    var = start ** 2 + np.concatenate([[0.0], np.cumsum((std[:-1] * dt) ** 2)])
    return np.minimum(np.sqrt(var), cfg.sigma_dp_cap)


def build_preceding_trajectory(fields: Sequence[CellField], target: TargetState,
                               leader_front: float | None, leader_length: float,
                               forecasts: Sequence[LcForecast], cfg: ControlConfig, pw: PwParams,
                               sig: SignalSchedule | None = None,
                               speed_std: np.ndarray | None = None,
                               veh_length: float = 5.0) -> PrecedingTrajectory:
    """Rear-bumper trajectory of whoever will be directly ahead of the target.

    The leader moves with the predicted speed field of the target's lane and holds at
    the stop bar while the signal is red.  A forecast lane change into the target's
    lane between the target and the leader replaces the reference from the step at
    which it is forecast.
    """
    n, dt = cfg.n_steps, cfg.dt_ctrl
    times = np.arange(n + 1) * dt
    lane = target.lane
    present = leader_front is not None
    if present:
        front = _advance(fields, lane, leader_front, 0.0, times, pw, sig, target.t)
        d_p = front - leader_length
        sigma = _sigma_along(front, lane, speed_std, dt, pw.dx, cfg)
    else:
        d_p = np.full(n + 1, np.inf)
        sigma = np.zeros(n + 1)

    switch = None
    best = None
    for f in forecasts:
        if f.lane_to != lane or f.time_offset > times[-1]:
            continue
        t_pos = target.position + target.speed * f.time_offset
        if f.position - veh_length <= t_pos:
            continue
        if present:
            lead_now = float(np.interp(f.time_offset, times, front))
            if f.position >= lead_now:
                continue
        key = (f.time_offset, f.position)
        if best is None or key < best[0]:
            best = (key, f)
    if best is not None:
        f = best[1]
        k0 = int(math.ceil(f.time_offset / dt - 1e-9))
        tail = times[k0:]
        cut_front = _advance(fields, lane, f.position, f.time_offset, tail, pw, sig, target.t)
        d_p = d_p.copy()
        sigma = sigma.copy()
        d_p[k0:] = cut_front - veh_length
        sigma[k0:] = _sigma_along(cut_front, lane, speed_std, dt, pw.dx, cfg,
                                  start=cfg.sigma_dp_fallback)
        present = True
        switch = k0
    return PrecedingTrajectory(d_p, sigma, present, switch)


# --- signal timing -------------------------------------------------------------

def min_arrival_time(distance: float, v_now: float, a_max: float, v_max: float) -> float:
    """Earliest time to cover ``distance`` accelerating at ``a_max`` up to ``v_max``."""
    if distance <= 0:
        return 0.0
    v_now = min(max(v_now, 0.0), v_max)
    t_acc = (v_max - v_now) / a_max
    d_acc = v_now * t_acc + 0.5 * a_max * t_acc ** 2
    if d_acc >= distance:
        return (-v_now + math.sqrt(v_now ** 2 + 2.0 * a_max * distance)) / a_max
    return t_acc + (distance - d_acc) / v_max


def target_windows(distance: float, sig: SignalSchedule, t_now: float, v_max: float,
                   v_now: float | None = None, a_max: float | None = None) -> list[tuple[float, float]]:
    """Admissible windows within two cycles whose end can still be reached, nearest first."""
    if not sig.has_red:
        return [(-math.inf, math.inf)]
    if v_now is None or a_max is None:
        t_min = distance / v_max
    else:
        t_min = min_arrival_time(distance, v_now, a_max, v_max)
    return [(s, e) for s, e in sig.admissible_windows(t_now, 2.0 * sig.cycle)
            if e > t_now + 1e-9 and t_now + t_min <= e + 1e-9]


def v_optimal(distance: float, sig: SignalSchedule, t_now: float, v_max: float,
              v_now: float | None = None, a_max: float | None = None, window: int = 0) -> float:
    """Speed that reaches the stop bar exactly at the end of the chosen admissible window."""
    if distance <= 0:
        return 0.0
    wins = target_windows(distance, sig, t_now, v_max, v_now, a_max)
    if window >= len(wins):
        return 0.0
    end = wins[window][1]
    if math.isinf(end):
        return v_max
    return min(v_max, max(0.0, distance / (end - t_now)))


# --- problem assembly ----------------------------------------------------------

@dataclass
class ControlProblem:
    n: int
    dt: float
    x0: float
    v0: float
    a_prev: float
    traj: PrecedingTrajectory
    v_lb: np.ndarray  # lower bound on v(1..N)
    v_ub: float
    a_min: float
    a_max: float
    use_dmax: bool
    use_dmin: bool
    stop_rows: list[int]  # x(k) <= d_signal - margin
    clear_rows: list[int]  # x(k) >= d_signal
    d_signal: float
    constraint_set: str
    v_opt: float | None = None
    window: tuple[float, float] | None = None
    cfg: ControlConfig = field(default_factory=ControlConfig)

    def __post_init__(self) -> None:
        n, dt = self.n, self.dt
        k = np.arange(n + 1)[:, None]
        j = np.arange(n)[None, :]
        self.Mv = np.where(j < k, dt, 0.0)
        self.Mx = np.where(j < k - 1, dt * dt * (k - 1 - j), 0.0)
        self.v_free = self.v0 + 0.0 * k[:, 0]
        self.x_free = self.x0 + self.v0 * dt * k[:, 0]

    def speeds(self, a: np.ndarray) -> np.ndarray:
        return self.v_free + self.Mv @ a

    def positions(self, a: np.ndarray) -> np.ndarray:
        return self.x_free + self.Mx @ a

    def linear_constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """``A z >= b`` rows (excluding simple variable bounds)."""
        n, c = self.n, self.cfg
        rows, rhs = [], []

        def add(coef_a, rhs_val, s1=None, s2=None):
            row = np.zeros(3 * n)
            row[:n] = coef_a
            if s1 is not None:
                row[n + s1] = 1.0
            if s2 is not None:
                row[2 * n + s2] = 1.0
            rows.append(row)
            rhs.append(rhs_val)

        for k in range(1, n + 1):
            add(self.Mv[k], self.v_lb[k - 1] - self.v_free[k])
            add(-self.Mv[k], self.v_free[k] - self.v_ub)
        tr = self.traj
        if tr.present:
            for k in range(1, n + 1):
                if not np.isfinite(tr.d_p[k]):
                    continue  # no reference vehicle yet at this step
                if self.use_dmin:
                    add(-(self.Mx[k] + c.h_min * self.Mv[k]),
                        self.x_free[k] + c.h_min * self.v_free[k]
                        - (tr.d_p[k] - c.beta_conf * tr.sigma[k] - c.d_min), s2=k - 1)
                if self.use_dmax:
                    add(self.Mx[k], tr.d_p[k] + c.beta_conf * tr.sigma[k] - c.d_max - self.x_free[k],
                        s1=k - 1)
        for k in self.stop_rows:
            add(-self.Mx[k], self.x_free[k] - (self.d_signal - STOP_MARGIN))
        for k in self.clear_rows:
            add(self.Mx[k], self.d_signal - self.x_free[k])
        if not rows:
            return np.zeros((0, 3 * n)), np.zeros(0)
        return np.array(rows), np.array(rhs)

    def bounds(self) -> list[tuple[float, float]]:
        n = self.n
        slack_hi_1 = None if (self.traj.present and self.use_dmax) else 0.0
        slack_hi_2 = None if (self.traj.present and self.use_dmin) else 0.0
        return ([(self.a_min, self.a_max)] * n + [(0.0, slack_hi_1)] * n + [(0.0, slack_hi_2)] * n)


def assemble_problem(state: TargetState, traj: PrecedingTrajectory, sig: SignalSchedule | None,
                     cfg: ControlConfig, pw: PwParams, window: int = 0) -> ControlProblem:
    """Constraint set for the current replan.

    Within SPaT range upstream of the stop bar the lower bound comes from the
    latest-arrival speed and the signal-passage rows; elsewhere the maximum-spacing
    rows keep the target with its leader, and on a free road the lower bound ramps
    toward the speed limit.
    """
    n, dt = cfg.n_steps, cfg.dt_ctrl
    t_k = np.arange(1, n + 1) * dt
    v_now = state.speed
    reach = v_now + cfg.a_max * t_k
    d_sig = sig.position if sig is not None else math.inf
    distance = d_sig - state.position
    in_range = (sig is not None and sig.has_red and 0.0 < distance <= cfg.spat_range)
    stop_rows: list[int] = []
    clear_rows: list[int] = []
    v_opt = None
    win = None
    use_dmax = False
    if in_range:
        wins = target_windows(distance, sig, state.t, cfg.v_max, v_now, cfg.a_max)
        if window < len(wins):
            win = wins[window]
            v_opt = min(cfg.v_max, max(0.0, distance / (win[1] - state.t)))
        else:
            v_opt = 0.0
        last_cell = distance <= pw.dx
        if last_cell and sig.is_admissible(state.t):
            rate = min(cfg.green_ramp_rate, cfg.a_max)
            lb = np.minimum.reduce([np.full(n, cfg.v_max), max(v_opt, v_now) + rate * t_k, reach])
        else:
            lb = np.minimum(v_opt, reach)
        ws, we = win if win is not None else (math.inf, math.inf)
        x1 = state.position + v_now * dt
        for k in range(n):
            t = state.t + k * dt
            if not sig.is_red(t):
                continue
            if t < ws:
                if k == 0 and x1 <= d_sig - STOP_MARGIN:
                    continue
                stop_rows.append(k + 1)
            elif t >= we:
                clear_rows.append(k if k > 0 else 1)
        clear_rows = sorted(set(clear_rows))
        cset = "spat"
    elif traj.present:
        lb = np.zeros(n)
        use_dmax = True
        cset = "follow"
    else:
        lb = np.minimum(np.full(n, cfg.v_max), np.maximum(v_now, 0.0) + cfg.green_ramp_rate * t_k)
        lb = np.minimum(lb, reach)
        cset = "free"
    lb = np.maximum(lb, cfg.v_min)
    return ControlProblem(n, dt, state.position, v_now, state.accel, traj, lb, cfg.v_max,
                          cfg.a_min, cfg.a_max, use_dmax, traj.present, stop_rows, clear_rows,
                          d_sig, cset, v_opt, win, cfg)


# --- objective -----------------------------------------------------------------

def power_terms(v: np.ndarray, a: np.ndarray, p: VehicleDynParams) -> np.ndarray:
    """Columns: aero, acceleration, rolling, grade (W)."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    return np.stack([0.5 * p.rho_air * p.cd_a * v ** 3,
                     p.k_m * p.m_t * a * v,
                     p.c_rr * p.m_t * p.g * v,
                     p.m_t * p.g * p.grade * v], axis=-1)


def objective_value(a: Sequence[float], v: Sequence[float], s1: Sequence[float], s2: Sequence[float],
                    p: VehicleDynParams, cfg: ControlConfig, a_prev: float = 0.0) -> float:
    """Horizon cost; ``v[k]`` is the speed at the start of step ``k`` (``len(v) == len(a)``)."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)[:a.size]
    da = np.diff(np.r_[a_prev, a])
    power = power_terms(v, a, p).sum(axis=1)
    pen = (cfg.w1 * a ** 2 + cfg.w2 * da ** 2 + cfg.w3 * np.asarray(s1) ** 2
           + cfg.w4 * np.asarray(s2) ** 2)
    return float(np.sum(power + pen) * cfg.dt_ctrl)


@dataclass(frozen=True)
class SolveResult:
    status: str
    objective: float
    iterations: int
    violation: float
    relinearizations: int = 0
    stationarity: float | None = None
    fallback: bool = False
    window: int = 0


_SCALE = 1e-4


def _lin_objective(z: np.ndarray, prob: ControlProblem, p: VehicleDynParams, v_bar: np.ndarray):
    n, c, dt = prob.n, prob.cfg, prob.dt
    a, s1, s2 = z[:n], z[n:2 * n], z[2 * n:]
    v = prob.speeds(a)[:n]
    c3 = 0.5 * p.rho_air * p.cd_a
    c1 = p.c_rr * p.m_t * p.g + p.m_t * p.g * p.grade
    km = p.k_m * p.m_t
    da = np.diff(np.r_[prob.a_prev, a])
    aero = c3 * v_bar ** 3 + 3.0 * c3 * v_bar ** 2 * (v - v_bar)
    f = np.sum(aero + c1 * v + km * a * v + c.w1 * a ** 2 + c.w2 * da ** 2
               + c.w3 * s1 ** 2 + c.w4 * s2 ** 2) * dt
    g_v = 3.0 * c3 * v_bar ** 2 + c1 + km * a
    grad_a = prob.Mv[:n].T @ g_v + km * v + 2.0 * c.w1 * a + 2.0 * c.w2 * da
    grad_a[:-1] -= 2.0 * c.w2 * da[1:]
    grad = np.concatenate([grad_a, 2.0 * c.w3 * s1, 2.0 * c.w4 * s2]) * dt
    return f * _SCALE, grad * _SCALE


def _violation(z: np.ndarray, A: np.ndarray, b: np.ndarray, bounds) -> float:
    viol = 0.0
    if A.size:
        viol = max(viol, float(np.max(np.maximum(b - A @ z, 0.0))))
    for zi, (lo, hi) in zip(z, bounds):
        if lo is not None:
            viol = max(viol, lo - zi)
        if hi is not None:
            viol = max(viol, zi - hi)
    return viol


def _stationarity(z, grad, A, b, bounds, tol=1e-6) -> float:
    """Least-squares KKT residual over the active set (nonnegative multipliers)."""
    cols = []
    if A.size:
        active = np.nonzero(A @ z - b <= tol)[0]
        cols.extend(A[i] for i in active)
    for i, (lo, hi) in enumerate(bounds):
        e = np.zeros(z.size)
        if lo is not None and z[i] - lo <= tol:
            e[i] = 1.0
            cols.append(e)
        elif hi is not None and hi - z[i] <= tol:
            e[i] = -1.0
            cols.append(e)
    if not cols:
        return float(np.linalg.norm(grad))
    _, res = nnls(np.array(cols).T, grad)
    return float(res)


def solve(prob: ControlProblem, p: VehicleDynParams, z0: np.ndarray | None = None):
    """Successive-linearisation SLSQP.  Returns ``(a, s1, s2, SolveResult)``."""
    n, c = prob.n, prob.cfg
    A, b = prob.linear_constraints()
    bounds = prob.bounds()
    if z0 is None:
        z0 = np.zeros(3 * n)
    z = np.clip(z0, [lo if lo is not None else -np.inf for lo, _ in bounds],
                [hi if hi is not None else np.inf for _, hi in bounds])
    cons = [{"type": "ineq", "fun": lambda zz: A @ zz - b, "jac": lambda zz: A}] if A.size else []
    v_bar = np.maximum(prob.speeds(z[:n])[:n], 0.0)
    iters = 0
    status = MAX_ITER
    res = None
    for relin in range(1, c.max_relinearizations + 1):
        with warnings.catch_warnings():
            # SLSQP clips its own line-search steps back into the bounds; harmless
            warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
            res = minimize(_lin_objective, z, args=(prob, p, v_bar), jac=True, method="SLSQP",
                           bounds=bounds, constraints=cons,
                           options={"maxiter": c.max_iter, "ftol": 1e-10})
        iters += int(res.nit)
        z = res.x
        v_new = np.maximum(prob.speeds(z[:n])[:n], 0.0)
        moved = float(np.max(np.abs(v_new - v_bar)))
        v_bar = v_new
        if moved < c.relinearize_tol:
            break
    viol = _violation(z, A, b, bounds)
    if viol <= 1e-6 and res is not None and res.status in (0, 9):
        status = OPTIMAL if res.status == 0 else MAX_ITER
    elif viol > 1e-6:
        status = INFEASIBLE
    _, grad = _lin_objective(z, prob, p, v_bar)
    stat = _stationarity(z, grad, A, b, bounds)
    a, s1, s2 = z[:n], z[n:2 * n], z[2 * n:]
    obj = objective_value(a, prob.speeds(a)[:n], s1, s2, p, c, prob.a_prev)
    return a.copy(), s1.copy(), s2.copy(), SolveResult(status, obj, iters, viol, relin, stat)


def emergency_profile(prob: ControlProblem, p: VehicleDynParams):
    n = prob.n
    a = np.full(n, prob.a_min)
    v = prob.speeds(a)
    # hold at zero once stopped
    for k in range(n):
        if v[k] + a[k] * prob.dt < 0:
            a[k] = -v[k] / prob.dt if v[k] > 0 else 0.0
            v = prob.speeds(a)
    z = np.zeros(n)
    obj = objective_value(a, prob.speeds(a)[:n], z, z, p, prob.cfg, prob.a_prev)
    return a, z, z.copy(), SolveResult(INFEASIBLE, obj, 0, float("nan"), 0, None, True)


@dataclass
class ControlDecision:
    accels: np.ndarray  # the apply_steps values handed to the vehicle
    plan: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    result: SolveResult
    problem: ControlProblem


def plan_control(state: TargetState, traj: PrecedingTrajectory, sig: SignalSchedule | None,
                 cfg: ControlConfig, pw: PwParams, p: VehicleDynParams,
                 warm: np.ndarray | None = None) -> ControlDecision:
    """Assemble and solve; on infeasibility try the next green window, then brake."""
    prob = assemble_problem(state, traj, sig, cfg, pw)
    a, s1, s2, res = solve(prob, p, warm)
    if res.status == INFEASIBLE and prob.constraint_set == "spat":
        alt = assemble_problem(state, traj, sig, cfg, pw, window=1)
        a2, s12, s22, res2 = solve(alt, p, None)
        if res2.status != INFEASIBLE:
            prob, a, s1, s2 = alt, a2, s12, s22
            res = SolveResult(res2.status, res2.objective, res2.iterations, res2.violation,
                              res2.relinearizations, res2.stationarity, False, 1)
    if res.status == INFEASIBLE:
        a, s1, s2, res = emergency_profile(prob, p)
    return ControlDecision(a[:cfg.apply_steps].copy(), a, s1, s2, res, prob)


def shift_warm_start(decision: ControlDecision, steps: int) -> np.ndarray:
    n = decision.problem.n
    a = np.r_[decision.plan[steps:], np.full(steps, decision.plan[-1])]
    s1 = np.r_[decision.s1[steps:], np.zeros(steps)]
    s2 = np.r_[decision.s2[steps:], np.zeros(steps)]
    return np.concatenate([a, s1, s2])[:3 * n]


CONTROL_COLUMNS = ("t", "x", "v", "a", "d_p", "constraint_set", "stop_rows", "clear_rows",
                   "s1", "s2", "status", "fallback", "p_aero", "p_accel", "p_roll", "p_grade")


def write_control_log(path: str | Path, rows: Iterable[Sequence], header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(CONTROL_COLUMNS)
        for r in rows:
            w.writerow(r)
