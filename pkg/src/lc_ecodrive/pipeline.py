"""Per-replan chain: estimate, forecast lane changes, propagate, plan.

One :class:`Pipeline` serves one target vehicle in one scenario.  With ``use_lc``
off it is the baseline arm: the same estimator and controller, with no lane-change
forecasts and no injections.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ScenarioConfig
from .controller import (ControlDecision, PrecedingTrajectory, TargetState,
                         build_preceding_trajectory, plan_control, shift_warm_start)
from .estimator import (StateEstimate, extract_cv_measurements, extract_cv_reports, initial_estimate,
                        ukf_predict, ukf_update)
from .lcpredict import BenefitLedger, LcForecast, forecast_lc, injections_from_forecasts, is_identified
from .pw import Boundary, CellField, LcInjection, propagate
from .signal import SignalSchedule


@dataclass
class PipelineOutput:
    t: float
    estimate: StateEstimate
    fields: list[CellField]
    forecasts: list[LcForecast]
    injections: list[list[LcInjection]]


@dataclass
class Pipeline:
    cfg: ScenarioConfig
    sig: SignalSchedule
    cells: int
    use_lc: bool = True
    meas_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    estimate: StateEstimate | None = None
    ledger: BenefitLedger | None = None
    last: PipelineOutput | None = None
    warm: np.ndarray | None = None
    step_times: list[float] = field(default_factory=list)
    _pending: list[LcInjection] = field(default_factory=list)
    _observe_time: float = 0.0

    def __post_init__(self) -> None:
        c = self.cfg
        self.ledger = BenefitLedger(c.pw.dx)
        self.estimate = initial_estimate(c.network.lanes, self.cells, self.inflow(0.0), c.pw, c.ukf, 0.0)

    @property
    def horizon_steps(self) -> int:
        return int(round(self.cfg.control.horizon_s / self.cfg.pw.dt_model))

    def inflow(self, t: float) -> tuple[float, ...]:
        d = self.cfg.demand
        lanes = self.cfg.network.lanes
        vols = [d.volume_per_lane[min(i, len(d.volume_per_lane) - 1)] for i in range(lanes)]
        if t > d.departure_window:
            vols = [0.0] * lanes
        return tuple(v / 3600.0 for v in vols)

    def boundary(self, t: float) -> Boundary:
        return Boundary("open", self.inflow(t))

    def observe(self, t: float, vehicles: Sequence, target_id: int | None) -> PipelineOutput:
        """Time and measurement update, then forecasts and the predicted fields."""
        started = time.perf_counter()
        c = self.cfg
        est = self.estimate
        if t > est.timestamp + 1e-9:
            est = ukf_predict(est, self._pending, self.sig, c.ukf, c.pw, self.boundary(est.timestamp),
                              dt=t - est.timestamp)
        meas = extract_cv_measurements(vehicles, c.sim.meas_noise_v_std, c.sim.meas_noise_d_std,
                                       self.meas_rng, c.sim.sensor_range)
        est = ukf_update(est, meas, c.ukf, c.pw)
        self.estimate = est
        plain = propagate(est.mean, None, self.sig, self.horizon_steps, c.pw, t, self.boundary(t))
        forecasts: list[LcForecast] = []
        injections: list[list[LcInjection]] = [[] for _ in range(self.horizon_steps)]
        fields = plain
        if self.use_lc:
            reports = extract_cv_reports(vehicles, c.sim.sensor_range)
            exclude = () if target_id is None else (target_id,)
            forecasts = forecast_lc(plain, reports, c.lc, c.pw, self.ledger, t, exclude)
            if forecasts:
                injections = injections_from_forecasts(forecasts, c.lc, c.pw, self.horizon_steps)
                fields = propagate(est.mean, injections, self.sig, self.horizon_steps, c.pw, t,
                                   self.boundary(t))
        self._pending = injections[0] if injections else []
        self.last = PipelineOutput(t, est, fields, forecasts, injections)
        self._observe_time = time.perf_counter() - started
        return self.last

    def control(self, state: TargetState, leader_front: float | None,
                leader_length: float) -> ControlDecision:
        c = self.cfg
        out = self.last
        # fields are on the model grid anchored at out.t; shift the plan time base
        lag = state.t - out.t
        fields = out.fields
        if lag > 1e-9:
            skip = int(math.floor(lag / c.pw.dt_model + 1e-9))
            fields = fields[skip:] or fields[-1:]
        forecasts = [f for f in out.forecasts if f.time_offset >= lag - 1e-9
                     and (is_identified(f) or not c.control.cut_in_identified_only)]
        if lag > 1e-9:
            forecasts = [LcForecast(f.lane_from, f.lane_to, f.cell, f.time_offset - lag, f.position,
                                    f.v_lc, f.vehicle) for f in forecasts]
        traj = build_preceding_trajectory(fields, state, leader_front, leader_length, forecasts,
                                          c.control, c.pw, self.sig, out.estimate.speed_std(),
                                          c.lc.veh_length)
        decision = plan_control(state, traj, self.sig, c.control, c.pw, c.dyn, self.warm)
        self.warm = shift_warm_start(decision, c.control.apply_steps)
        return decision

    def step_controller(self, t: float, vehicles: Sequence, target_id: int | None,
                        state: TargetState, leader_front: float | None,
                        leader_length: float) -> ControlDecision:
        """Full chain for one replan; wall time (observation included) goes to ``step_times``."""
        if self.last is None or abs(self.last.t - t) > 1e-9:
            self.observe(t, vehicles, target_id)
        t0 = time.perf_counter()
        decision = self.control(state, leader_front, leader_length)
        self.step_times.append(time.perf_counter() - t0 + self._observe_time)
        return decision
