from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lc_ecodrive.config import ControlConfig, PwParams, VehicleDynParams
from lc_ecodrive.controller import (INFEASIBLE, STOP_MARGIN, PrecedingTrajectory, TargetState,
                                    assemble_problem, build_preceding_trajectory, objective_value,
                                    plan_control, power_terms, rollout_dynamics, shift_warm_start, solve,
                                    v_optimal, write_control_log)
from lc_ecodrive.lcpredict import LcForecast
from lc_ecodrive.pw import CellField, propagate
from lc_ecodrive.signal import GREEN, RED, YELLOW, SignalSchedule

from oracles import dp_speed_profile

CFG = ControlConfig()
PW = PwParams()
DYN = VehicleDynParams()
N = CFG.n_steps


def red_light_instance(distance=100.0, to_green=20.0):
    # red started 2 s ago in a 20/2/20 cycle; turns green ``to_green`` seconds from now
    sig = SignalSchedule(distance, ((GREEN, 20.0), (YELLOW, 2.0), (RED, 20.0)), offset=to_green - 42.0)
    return sig, TargetState(0.0, 15.0, 0.0, 0.0)


# --- dynamics --------------------------------------------------------------------------

def test_rollout_constant_speed():
    v, x = rollout_dynamics(np.zeros(4), 10.0, 0.0, 0.5)
    np.testing.assert_allclose(x, [0, 5, 10, 15, 20])
    np.testing.assert_allclose(v, 10.0)


def test_rollout_lag_equals_dropped_quadratic_term():
    a, dt = np.full(6, 2.0), 0.5
    v, x = rollout_dynamics(a, 0.0, 0.0, dt)
    np.testing.assert_allclose(v, np.arange(7) * 1.0)
    t = np.arange(7) * dt
    exact = 0.5 * 2.0 * t ** 2
    np.testing.assert_allclose(exact - x, np.arange(7) * 0.5 * 2.0 * dt ** 2)


# --- preceding trajectory ------------------------------------------------------------------

def uniform_fields(v=12.0, rho=0.03, cells=60, steps=11):
    f = CellField.uniform(2, cells, rho, v)
    return [f] * steps


def test_uniform_field_leader_moves_at_field_speed():
    tgt = TargetState(20.0, 12.0, 0.0, 0.0)
    tr = build_preceding_trajectory(uniform_fields(), tgt, 105.0, 5.0, [], CFG, PW)
    np.testing.assert_allclose(tr.d_p, 100.0 + 12.0 * np.arange(N + 1) * CFG.dt_ctrl)
    assert tr.present and tr.switch_step is None


def test_no_leader_is_absent():
    tr = build_preceding_trajectory(uniform_fields(), TargetState(0, 10, 0, 0), None, 5.0, [], CFG, PW)
    assert not tr.present
    assert np.all(np.isinf(tr.d_p))


def test_leader_stalls_at_red_signal():
    sig = SignalSchedule(300.0, ((RED, 60.0), (GREEN, 20.0)))
    start = CellField.uniform(1, 40, 0.03, 12.0)
    fields = propagate(start, None, sig, 10, PW)
    tgt = TargetState(150.0, 12.0, 0.0, 0.0)
    tr = build_preceding_trajectory(fields, tgt, 250.0, 5.0, [], CFG, PW, sig)
    front = tr.d_p + 5.0
    assert np.all(np.diff(front) >= -1e-9)
    assert front[-1] <= 300.0 + 1e-9
    assert front[-1] - front[-3] < 12.0 * 2 * CFG.dt_ctrl


def test_cut_in_switches_reference():
    tgt = TargetState(0.0, 10.0, 0.0, 0.0)
    f = LcForecast(0, 1, 3, 3.0, 50.0, 10.0, ("cv", 9))  # 20 m ahead of the target at +3 s
    tr = build_preceding_trajectory(uniform_fields(v=10.0), replace(tgt, lane=1), 200.0, 5.0, [f], CFG, PW)
    assert tr.switch_step == 6
    x_target = 10.0 * 6 * CFG.dt_ctrl
    assert tr.d_p[6] - x_target >= 20.0 - 5.0 - 1e-9
    assert tr.d_p[5] > tr.d_p[6]  # the farther leader was the reference before


def test_cut_in_behind_target_ignored():
    tgt = TargetState(100.0, 10.0, 0.0, 0.0, lane=1)
    f = LcForecast(0, 1, 5, 1.0, 90.0, 10.0)
    tr = build_preceding_trajectory(uniform_fields(v=10.0), tgt, 200.0, 5.0, [f], CFG, PW)
    assert tr.switch_step is None


# --- signal timing -------------------------------------------------------------------------

def latest_arrival_scan(distance, sig, v_max, step=0.1, cycles=2):
    """Speed reaching the bar at the last instant of the first reachable admissible window."""
    t_grid = np.arange(step, cycles * sig.cycle + step / 2, step)
    ok = [sig.is_admissible(t) and distance / t <= v_max + 1e-9 for t in t_grid]
    first = next(i for i, o in enumerate(ok) if o)
    last = first
    while last + 1 < len(ok) and sig.is_admissible(t_grid[last + 1]):
        last += 1
    return distance / t_grid[last]


def test_v_optimal_red_then_green():
    sig = SignalSchedule(150.0, ((RED, 10.0), (GREEN, 20.0), (RED, 10.0)))
    assert v_optimal(150.0, sig, 0.0, 15.0) == pytest.approx(5.0)
    assert v_optimal(150.0, sig, 0.0, 15.0) == pytest.approx(latest_arrival_scan(150.0, sig, 15.0), abs=0.02)


def test_v_optimal_green_now():
    sig = SignalSchedule(100.0, ((GREEN, 30.0), (RED, 30.0)))
    v = v_optimal(100.0, sig, 0.0, 15.0)
    assert 0 < v <= 15.0


def test_v_optimal_at_stop_bar():
    sig = SignalSchedule(100.0, ((GREEN, 30.0), (RED, 30.0)))
    assert v_optimal(0.0, sig, 0.0, 15.0) == 0.0


def test_v_optimal_unreachable_window():
    sig = SignalSchedule(5000.0, ((GREEN, 5.0), (RED, 30.0)))
    assert v_optimal(5000.0, sig, 0.0, 15.0) == 0.0


@given(st.floats(20, 340), st.floats(0, 60))
def test_v_optimal_arrival_is_admissible(distance, t_now):
    sig = SignalSchedule(400.0, ((GREEN, 20.0), (YELLOW, 2.0), (RED, 20.0)))
    v = v_optimal(distance, sig, t_now, 15.0)
    if v > 0:
        arrive = t_now + distance / v
        assert sig.is_admissible(arrive - 1e-6)


# --- problem assembly ------------------------------------------------------------------------

def test_free_road_only_bounds():
    prob = assemble_problem(TargetState(0, 10, 0, 0), PrecedingTrajectory.absent(N), None, CFG, PW)
    assert prob.constraint_set == "free"
    assert not prob.use_dmin and not prob.use_dmax
    A, _ = prob.linear_constraints()
    assert A.shape[0] == 2 * N  # speed bounds only


def test_stop_rows_at_red_steps():
    sig, tgt = red_light_instance(100.0, 5.0)
    prob = assemble_problem(tgt, PrecedingTrajectory.absent(N), sig, CFG, PW)
    red_steps = [k for k in range(N) if sig.is_red(k * CFG.dt_ctrl)]
    assert prob.constraint_set == "spat"
    assert prob.stop_rows == [k + 1 for k in red_steps if k > 0 or tgt.speed * CFG.dt_ctrl > 100 - STOP_MARGIN]


def test_leader_rows_every_step():
    d_p = 60.0 + 10.0 * np.arange(N + 1) * CFG.dt_ctrl
    tr = PrecedingTrajectory(d_p, np.full(N + 1, 1.0), True)
    sig = SignalSchedule(300.0, ((GREEN, 200.0), (RED, 10.0)))
    prob = assemble_problem(TargetState(0, 10, 0, 0), tr, sig, CFG, PW)
    A, b = prob.linear_constraints()
    rows = A[2 * N:2 * N + N]
    for k in range(1, N + 1):
        np.testing.assert_allclose(rows[k - 1, :N], -(prob.Mx[k] + CFG.h_min * prob.Mv[k]))
        assert rows[k - 1, 2 * N + k - 1] == 1.0
        expect = prob.x_free[k] + CFG.h_min * prob.v_free[k] - (d_p[k] - CFG.beta_conf * 1.0 - CFG.d_min)
        assert b[2 * N + k - 1] == pytest.approx(expect)


# --- objective -----------------------------------------------------------------------------

def test_objective_zero_at_rest():
    z = np.zeros(N)
    assert objective_value(z, z, z, z, DYN, CFG) == 0.0


def test_power_terms_columns():
    p = power_terms(np.array([10.0]), np.array([1.0]), DYN)[0]
    assert p[0] == pytest.approx(0.5 * 1.2 * 0.66 * 1000)
    assert p[1] == pytest.approx(1.1 * 1550 * 10)
    assert p[2] == pytest.approx(0.008 * 1550 * 9.81 * 10)
    assert p[3] == 0.0


# --- solve -------------------------------------------------------------------------------------

def test_free_road_cruise_needs_no_acceleration():
    sig = SignalSchedule(5000.0, ((GREEN, 1000.0), (RED, 10.0)))
    dec = plan_control(TargetState(0.0, 15.0, 0.0, 0.0), PrecedingTrajectory.absent(N), sig, CFG, PW, DYN)
    assert np.max(np.abs(dec.plan)) <= 0.05


def test_red_light_beats_stop_and_go():
    sig, tgt = red_light_instance()
    prob = assemble_problem(tgt, PrecedingTrajectory.absent(N), sig, CFG, PW)
    a, s1, s2, res = solve(prob, DYN)
    assert res.status == "optimal"
    v = prob.speeds(a)
    x = prob.positions(a)
    assert np.all(x <= 100.0 - STOP_MARGIN + 1e-6)
    assert np.all(np.diff(v) <= 1e-9)  # monotone slow-down, no stop-and-go
    assert np.max(np.abs(np.diff(a))) < 0.5
    # naive: cruise, then brake at a_min to stop at the bar, then wait
    brake_steps = int(math.ceil(15.0 / 4.5 / CFG.dt_ctrl))
    naive = np.zeros(N)
    naive[4:4 + brake_steps] = -15.0 / (brake_steps * CFG.dt_ctrl)
    vn = prob.speeds(naive)
    zero = np.zeros(N)
    assert res.objective <= objective_value(naive, vn[:N], zero, zero, DYN, CFG)


def test_red_light_close_to_dp_oracle():
    sig, tgt = red_light_instance()
    prob = assemble_problem(tgt, PrecedingTrajectory.absent(N), sig, CFG, PW)
    _, _, _, res = solve(prob, DYN)
    cap = np.full(N + 1, np.inf)
    cap[prob.stop_rows] = 100.0 - STOP_MARGIN
    j_dp, acc = dp_speed_profile(0.0, 15.0, N, CFG.dt_ctrl, prob.v_lb, CFG.v_max, CFG.a_min, CFG.a_max,
                                 cap, DYN, CFG)
    assert math.isfinite(j_dp) and len(acc) == N
    assert res.objective <= j_dp + 0.03 * abs(j_dp)


def _cut_in(gap, v_lead, v0=12.0):
    d_p = gap + v_lead * np.arange(N + 1) * CFG.dt_ctrl
    tr = PrecedingTrajectory(d_p, np.zeros(N + 1), True, 0)
    return d_p, plan_control(TargetState(0.0, v0, 0.0, 0.0), tr, None, CFG, PW, DYN)


def _hard_margin_after_full_braking(d_p, v0=12.0):
    v, x = rollout_dynamics(np.full(N, CFG.a_min), v0, 0.0, CFG.dt_ctrl)
    v = np.maximum(v, 0.0)
    return d_p - CFG.d_min - CFG.h_min * v - x


def test_cut_in_close_ahead_binds_min_spacing():
    d_p, dec = _cut_in(15.0, 10.0)
    prob = dec.problem
    v = prob.speeds(dec.plan)
    x = prob.positions(dec.plan)
    margin = d_p - CFG.d_min - CFG.h_min * v - x
    assert np.min(margin[1:] + dec.s2) >= -1e-6
    assert np.min(np.abs(margin[1:] + dec.s2)) < 1e-3  # the row is active
    # even braking at a_min cannot restore the margin at the first step, so slack is used
    assert _hard_margin_after_full_braking(d_p)[1] < 0
    assert dec.s2.max() > 0


@pytest.mark.parametrize("gap,v_lead", [(25.0, 10.0), (30.0, 8.0), (40.0, 5.0)])
def test_restorable_cut_in_needs_no_slack(gap, v_lead):
    d_p, dec = _cut_in(gap, v_lead)
    assert np.all(_hard_margin_after_full_braking(d_p)[1:] >= 0)
    assert dec.s2.max() < 1e-6


def test_infeasible_stop_falls_back_to_emergency_braking():
    sig, _ = red_light_instance(5.0, 20.0)
    dec = plan_control(TargetState(0.0, 15.0, 0.0, 0.0), PrecedingTrajectory.absent(N), sig, CFG, PW, DYN)
    assert dec.result.fallback
    assert dec.result.status == INFEASIBLE
    assert dec.accels[0] == CFG.a_min


def test_replan_determinism():
    sig, tgt = red_light_instance()
    a = plan_control(tgt, PrecedingTrajectory.absent(N), sig, CFG, PW, DYN)
    b = plan_control(tgt, PrecedingTrajectory.absent(N), sig, CFG, PW, DYN)
    np.testing.assert_array_equal(a.plan, b.plan)


def test_warm_start_shift():
    sig, tgt = red_light_instance()
    dec = plan_control(tgt, PrecedingTrajectory.absent(N), sig, CFG, PW, DYN)
    z = shift_warm_start(dec, 2)
    assert z.shape == (3 * N,)
    np.testing.assert_array_equal(z[:N - 2], dec.plan[2:])


@given(st.floats(0, 15), st.floats(20, 200), st.floats(0, 15))
@settings(max_examples=20)
def test_solution_respects_bounds(v0, gap, v_lead):
    d_p = gap + v_lead * np.arange(N + 1) * CFG.dt_ctrl
    tr = PrecedingTrajectory(d_p, np.full(N + 1, 1.0), True)
    dec = plan_control(TargetState(0.0, v0, 0.0, 0.0), tr, None, CFG, PW, DYN)
    if dec.result.fallback:
        return
    v = dec.problem.speeds(dec.plan)
    assert np.all(dec.plan >= CFG.a_min - 1e-6) and np.all(dec.plan <= CFG.a_max + 1e-6)
    assert np.all(v >= -1e-6) and np.all(v <= CFG.v_max + 1e-6)


def test_control_log(tmp_path):
    path = tmp_path / "c.csv"
    write_control_log(path, [(0.0, 1.0)], "x")
    assert path.read_text().splitlines()[0] == "# x"
