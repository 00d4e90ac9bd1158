"""Connected-vehicle measurements and a per-lane unscented Kalman filter.

The filter state of one lane is ``[rho_0..rho_{J-1}, V_0..V_{J-1}]``; lanes are
filtered independently (block-diagonal covariance).  The process model is one
call of :func:`lc_ecodrive.pw.propagate_arrays` on the whole sigma-point batch and
the measurement model is the cell-centred interpolation of :mod:`lc_ecodrive.pw`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Protocol, Sequence

import numpy as np

from .config import PwParams, UkfConfig
from .pw import (OPEN, Boundary, CellField, LcInjection, equilibrium_speed_array,
                 injection_arrays, interpolation_coords, propagate_arrays)
from .signal import SignalSchedule

log = logging.getLogger(__name__)

SPEED, SPACING = "speed", "spacing"


class VehicleLike(Protocol):
    vid: int
    lane: int
    position: float
    speed: float
    length: float

    @property
    def connected(self) -> bool: ...


@dataclass(frozen=True)
class Measurement:
    kind: str  # SPEED | SPACING
    lane: int
    position: float  # vehicle front, or the midpoint between a CV and its leader
    value: float


@dataclass(frozen=True)
class CvReport:
    """What one connected vehicle broadcasts about itself and its leader."""

    vid: int
    lane: int
    position: float
    speed: float
    leader_gap: float | None = None  # bumper to bumper
    leader_speed: float | None = None


def _by_lane(vehicles: Iterable[VehicleLike]) -> dict[int, list[VehicleLike]]:
    lanes: dict[int, list[VehicleLike]] = {}
    for v in vehicles:
        lanes.setdefault(v.lane, []).append(v)
    for lst in lanes.values():
        lst.sort(key=lambda veh: veh.position)
    return lanes


def extract_cv_measurements(vehicles: Iterable[VehicleLike], noise_v_std: float = 0.0,
                            noise_d_std: float = 0.0, rng: np.random.Generator | None = None,
                            sensor_range: float = math.inf) -> list[Measurement]:
    """Speed of every CV and of its immediate leader, plus the CV-leader spacing.

    Each vehicle contributes at most one speed entry, so at full penetration a lane
    with ``n`` vehicles yields ``n`` speeds and ``n - 1`` spacings.  Leaders further
    than ``sensor_range`` (front to front) are not seen.
    """
    def noisy(x: float, std: float) -> float:
        return x + float(rng.normal(0.0, std)) if std > 0 and rng is not None else x

    out: list[Measurement] = []
    for lane, lst in sorted(_by_lane(vehicles).items()):
        seen: set[int] = set()
        for i, veh in enumerate(lst):
            if not veh.connected:
                continue
            if veh.vid not in seen:
                seen.add(veh.vid)
                out.append(Measurement(SPEED, lane, veh.position, noisy(veh.speed, noise_v_std)))
            if i + 1 >= len(lst):
                continue
            lead = lst[i + 1]
            spacing = lead.position - veh.position
            if spacing > sensor_range:
                continue
            out.append(Measurement(SPACING, lane, 0.5 * (lead.position + veh.position),
                                   noisy(spacing, noise_d_std)))
            if lead.vid not in seen:
                seen.add(lead.vid)
                out.append(Measurement(SPEED, lane, lead.position, noisy(lead.speed, noise_v_std)))
    return out


def extract_cv_reports(vehicles: Iterable[VehicleLike],
                       sensor_range: float = math.inf) -> list[CvReport]:
    out = []
    for lane, lst in sorted(_by_lane(vehicles).items()):
        for i, veh in enumerate(lst):
            if not veh.connected:
                continue
            gap = lead_v = None
            if i + 1 < len(lst) and lst[i + 1].position - veh.position <= sensor_range:
                lead = lst[i + 1]
                gap = max(0.0, lead.position - lead.length - veh.position)
                lead_v = lead.speed
            out.append(CvReport(veh.vid, lane, veh.position, veh.speed, gap, lead_v))
    return out


# --- filter ------------------------------------------------------------------

@dataclass(frozen=True)
class StateEstimate:
    mean: CellField
    cov: np.ndarray  # (lanes, 2J, 2J)
    timestamp: float
    clamp_events: int = 0
    resets: int = 0

    def speed_std(self) -> np.ndarray:
        j = self.mean.cells_per_lane
        diag = np.diagonal(self.cov, axis1=-2, axis2=-1)[:, j:]
        return np.sqrt(np.maximum(diag, 0.0))

    def density_std(self) -> np.ndarray:
        j = self.mean.cells_per_lane
        diag = np.diagonal(self.cov, axis1=-2, axis2=-1)[:, :j]
        return np.sqrt(np.maximum(diag, 0.0))


def _prior_cov(cells: int, cfg: UkfConfig, inflate: float = 1.0) -> np.ndarray:
    return np.diag(np.r_[np.full(cells, cfg.init_std_rho ** 2), np.full(cells, cfg.init_std_v ** 2)]) * inflate


def initial_estimate(lanes: int, cells: int, inflow: Sequence[float] | None, p: PwParams,
                     cfg: UkfConfig, t0: float = 0.0) -> StateEstimate:
    """Demand-rate prior: ``rho = q / v0`` (capped at the critical density), ``V = Ve(rho)``."""
    q = np.zeros(lanes) if inflow is None else np.asarray(inflow, dtype=float)
    rho = np.repeat(np.minimum(q / p.v0, p.rho_c)[:, None], cells, axis=1)
    v = equilibrium_speed_array(rho, p)
    cov = np.stack([_prior_cov(cells, cfg) for _ in range(lanes)])
    return StateEstimate(CellField(rho, v), cov, t0)


def _weights(n: int, cfg: UkfConfig):
    alpha = cfg.sigma_point_spread
    lam = alpha ** 2 * n - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + (1.0 - alpha ** 2 + cfg.beta)
    return wm, wc, n + lam


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(0.5 * (mat + mat.T))
        return u * np.sqrt(np.maximum(w, 0.0))


def repair_psd(mat: np.ndarray, floor: float = 0.0) -> np.ndarray | None:
    """Symmetrize and lift negative eigenvalues; None if the matrix is not finite."""
    if not np.all(np.isfinite(mat)):
        return None
    sym = 0.5 * (mat + mat.T)
    try:
        np.linalg.cholesky(sym + floor * np.eye(len(sym)))
        return sym
    except np.linalg.LinAlgError:
        pass
    w, u = np.linalg.eigh(sym)
    return (u * np.maximum(w, floor)) @ u.T


def sigma_points(mean: np.ndarray, cov: np.ndarray, cfg: UkfConfig):
    n = mean.size
    wm, wc, scale = _weights(n, cfg)
    root = _sqrt_psd(cov) * math.sqrt(scale)
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1:n + 1] = mean + root.T
    pts[n + 1:] = mean - root.T
    return pts, wm, wc


def _moments(pts: np.ndarray, wc: np.ndarray):
    """Centre image and spread about it.

    The centre point's image is the mean, so the (large, negative) centre weight
    drops out: the covariance is PSD by construction and exact for linear maps,
    and clamping or the ``1/rho`` pressure term cannot drag the mean away from the
    model trajectory.
    """
    centre = pts[0]
    dev = pts[1:] - centre
    return centre, (dev * wc[1:, None]).T @ dev, dev


def process_noise(cells: int, cfg: UkfConfig, scale: float = 1.0) -> np.ndarray:
    """Diagonal density noise; speed noise with exponential spatial correlation."""
    q = np.zeros((2 * cells, 2 * cells))
    q[:cells, :cells] = np.eye(cells) * cfg.process_noise_rho
    if cfg.process_noise_corr_cells > 0:
        lag = np.abs(np.subtract.outer(np.arange(cells), np.arange(cells)))
        q[cells:, cells:] = cfg.process_noise_v * np.exp(-lag / cfg.process_noise_corr_cells)
    else:
        q[cells:, cells:] = np.eye(cells) * cfg.process_noise_v
    return q * scale


def _lane_boundary(boundary: Boundary, lane: int) -> Boundary:
    if boundary.kind == "ring" or boundary.inflow is None:
        return boundary
    return Boundary("open", (boundary.inflow[lane],))


def ukf_predict(est: StateEstimate, injections: Sequence[LcInjection], sig: SignalSchedule | None,
                cfg: UkfConfig, p: PwParams, boundary: Boundary = OPEN,
                dt: float | None = None) -> StateEstimate:
    """Unscented time update through one PW step of length ``dt`` (default ``p.dt_model``)."""
    lanes, cells = est.mean.lanes, est.mean.cells_per_lane
    rho_lc, v_lc = injection_arrays(injections, lanes, cells)
    step = p.dt_model if dt is None else dt
    q = process_noise(cells, cfg, step / p.dt_model)
    lo = np.r_[np.zeros(cells), np.zeros(cells)]
    hi = np.r_[np.full(cells, p.rho_jam), np.full(cells, p.v0)]
    new_rho = np.empty_like(est.mean.rho)
    new_v = np.empty_like(est.mean.v)
    new_cov = np.empty_like(est.cov)
    clamps = est.clamp_events
    resets = est.resets
    for lane in range(lanes):
        x = np.r_[est.mean.rho[lane], est.mean.v[lane]]
        pts, _, wc = sigma_points(x, est.cov[lane], cfg)
        pts = np.clip(pts, lo, hi)
        r, v = propagate_arrays(pts[:, None, :cells], pts[:, None, cells:], p, sig, est.timestamp,
                                1, _lane_boundary(boundary, lane),
                                None if rho_lc is None else rho_lc[lane:lane + 1],
                                None if v_lc is None else v_lc[lane:lane + 1], dt=dt)
        prop = np.concatenate([r[:, 0, :], v[:, 0, :]], axis=1)
        m, cov, _ = _moments(prop, wc)
        clipped = np.clip(m, lo, hi)
        clamps += int(np.count_nonzero(clipped != m))
        fixed = repair_psd(cov + q)
        if fixed is None:
            log.warning("covariance repair failed in lane %d; resetting to an inflated prior", lane)
            fixed = _prior_cov(cells, cfg, inflate=4.0)
            resets += 1
        new_rho[lane], new_v[lane] = clipped[:cells], clipped[cells:]
        new_cov[lane] = fixed
    return StateEstimate(CellField(new_rho, new_v), new_cov, est.timestamp + step, clamps, resets)


def _observe(pts: np.ndarray, meas: Sequence[Measurement], cells: int, dx: float,
             rho_floor: float) -> np.ndarray:
    pos = np.array([m.position for m in meas])
    j, lam = interpolation_coords(pos, dx, cells)
    is_speed = np.array([m.kind == SPEED for m in meas])
    v = pts[:, cells:]
    rho = np.maximum(pts[:, :cells], rho_floor)
    speed = lam * v[:, j + 1] + (1.0 - lam) * v[:, j]
    spacing = lam / rho[:, j + 1] + (1.0 - lam) / rho[:, j]
    return np.where(is_speed, speed, spacing)


def ukf_update(est: StateEstimate, measurements: Sequence[Measurement], cfg: UkfConfig,
               p: PwParams) -> StateEstimate:
    """Unscented measurement update; lanes without measurements are left untouched."""
    if not measurements:
        return est
    cells = est.mean.cells_per_lane
    rho = est.mean.rho.copy()
    vel = est.mean.v.copy()
    cov = est.cov.copy()
    clamps = est.clamp_events
    lo = np.zeros(2 * cells)
    hi = np.r_[np.full(cells, p.rho_jam), np.full(cells, p.v0)]
    for lane in range(est.mean.lanes):
        meas = [m for m in measurements if m.lane == lane]
        if not meas:
            continue
        x = np.r_[rho[lane], vel[lane]]
        pts, _, wc = sigma_points(x, cov[lane], cfg)
        z = _observe(pts, meas, cells, p.dx, cfg.spacing_rho_floor)
        z_mean, s_mat, dz = _moments(z, wc)
        s_mat += np.diag([cfg.meas_noise_v if m.kind == SPEED else cfg.meas_noise_d for m in meas])
        cross = ((pts[1:] - x) * wc[1:, None]).T @ dz
        gain = np.linalg.solve(s_mat.T, cross.T).T
        y = np.array([m.value for m in meas])
        x_new = x + gain @ (y - z_mean)
        p_new = repair_psd(cov[lane] - gain @ s_mat @ gain.T)
        if p_new is None:
            log.warning("covariance repair failed after update in lane %d; keeping prior", lane)
            continue
        clipped = np.clip(x_new, lo, hi)
        clamps += int(np.count_nonzero(clipped != x_new))
        rho[lane], vel[lane] = clipped[:cells], clipped[cells:]
        cov[lane] = p_new
    return replace(est, mean=CellField(rho, vel), cov=cov, clamp_events=clamps)
