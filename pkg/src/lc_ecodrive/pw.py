"""Lane-change-aware Payne-Whitham cell model.

Per lane and cell ``j`` (upwind differences, downstream density in the pressure term)::

    rho_j' = rho_j - dt/dx * (rho_j V_j - rho_{j-1} V_{j-1}) + dt/dx * rhoLC_j VLC_j
    V_j'   = V_j - dt/dx * V_j (V_j - V_{j-1}) + dt (Ve(rho_j) - V_j) / tau
             - dt/dx * c0^2 (rho_{j+1} - rho_j) / (rho_j + eps)
             + rhoLC_j VLC_j (VLC_j - V_j) / (rho_j + eps) * dt/dx

Both updates read the state at ``t``.  Results are clamped to ``[0, rho_jam]`` and
``[0, v0]``; the number of clamped entries is carried on the returned field.

The array kernels accept any leading batch shape ``(..., lanes, cells)`` so the
estimator can push all sigma points through a single call.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .config import PwParams
from .signal import SignalSchedule

log = logging.getLogger(__name__)

NO_VEHICLE_AHEAD = None


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CellField:
    rho: np.ndarray
    v: np.ndarray
    # multiplier on the equilibrium speed (red-light influence); None = 1 everywhere
    ve_factor: np.ndarray | None = None
    clamp_events: int = 0

    def __post_init__(self) -> None:
        if self.rho.shape != self.v.shape or self.rho.ndim < 2:
            raise ValueError(f"rho/v shapes must match and be (lanes, cells): {self.rho.shape} {self.v.shape}")

    @property
    def lanes(self) -> int:
        return self.rho.shape[-2]

    @property
    def cells_per_lane(self) -> int:
        return self.rho.shape[-1]

    @classmethod
    def uniform(cls, lanes: int, cells: int, rho: float, v: float) -> "CellField":
        return cls(np.full((lanes, cells), float(rho)), np.full((lanes, cells), float(v)))

    def vehicle_count(self, dx: float) -> float:
        return float(self.rho.sum() * dx)


@dataclass(frozen=True)
class LcInjection:
    cell: int
    lane: int
    rho_lc: float  # veh/m, positive = entering this lane
    v_lc: float


@dataclass(frozen=True)
class Boundary:
    """``open``: upstream ghost at ``inflow/v0`` moving at ``v0``, downstream copy.
    ``ring``: periodic lanes (closed system)."""

    kind: str = "open"
    inflow: tuple[float, ...] | None = None  # veh/s per lane

    def __post_init__(self) -> None:
        if self.kind not in ("open", "ring"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")


OPEN = Boundary()
RING = Boundary("ring")


def equilibrium_speed(rho: float, p: PwParams) -> float:
    """Free-flow speed up to the critical density, then ``c (rho_jam/rho - 1)``."""
    if not (0.0 <= rho <= p.rho_jam) or math.isnan(rho):
        raise DomainError(f"density {rho} outside [0, {p.rho_jam}]")
    if rho <= p.rho_c:
        return p.v0
    return min(p.v0, max(0.0, p.c_slope * (p.rho_jam / rho - 1.0)))


def critical_density(p: PwParams) -> float:
    return p.rho_jam / (p.v0 / p.c_slope + 1.0)


def equilibrium_speed_array(rho: np.ndarray, p: PwParams) -> np.ndarray:
    rho_c = p.rho_c
    safe = np.maximum(rho, rho_c)
    ve = np.where(rho <= rho_c, p.v0, p.c_slope * (p.rho_jam / safe - 1.0))
    return np.clip(ve, 0.0, p.v0)


def signal_cell(sig: SignalSchedule, p: PwParams) -> int:
    """Cell containing the stop bar (the last cell vehicles occupy while waiting)."""
    return int(math.floor((sig.position - 1e-9) / p.dx))


def _neighbours(arr: np.ndarray, boundary: Boundary, upstream_ghost: np.ndarray | float | None):
    if boundary.kind == "ring":
        return np.roll(arr, 1, axis=-1), np.roll(arr, -1, axis=-1)
    up = np.empty_like(arr)
    up[..., 1:] = arr[..., :-1]
    up[..., 0] = upstream_ghost if upstream_ghost is not None else 0.0
    dn = np.empty_like(arr)
    dn[..., :-1] = arr[..., 1:]
    dn[..., -1] = arr[..., -1]
    return up, dn


def _ghost(boundary: Boundary, p: PwParams, lanes: int):
    if boundary.inflow is None:
        return np.zeros(lanes), np.full(lanes, p.v0)
    q = np.asarray(boundary.inflow, dtype=float)
    if q.shape != (lanes,):
        raise ValueError(f"inflow must give one rate per lane, got {q.shape}")
    return np.minimum(q / p.v0, p.rho_c), np.full(lanes, p.v0)


def density_update(rho, v, rho_lc, v_lc, p: PwParams, boundary: Boundary = OPEN) -> np.ndarray:
    """Unclamped density update on ``(..., lanes, cells)`` arrays."""
    lanes = rho.shape[-2]
    g_rho, g_v = _ghost(boundary, p, lanes)
    rho_up, _ = _neighbours(rho, boundary, g_rho)
    v_up, _ = _neighbours(v, boundary, g_v)
    dt_dx = p.dt_model / p.dx
    out = rho - dt_dx * (rho * v - rho_up * v_up)
    if rho_lc is not None:
        out = out + dt_dx * rho_lc * v_lc
    return out


def speed_update(rho, v, rho_lc, v_lc, p: PwParams, boundary: Boundary = OPEN,
                 ve_factor: np.ndarray | None = None) -> np.ndarray:
    """Unclamped speed update on ``(..., lanes, cells)`` arrays."""
    lanes = rho.shape[-2]
    g_rho, g_v = _ghost(boundary, p, lanes)
    _, rho_dn = _neighbours(rho, boundary, g_rho)
    v_up, _ = _neighbours(v, boundary, g_v)
    dt_dx = p.dt_model / p.dx
    ve = equilibrium_speed_array(rho, p)
    if ve_factor is not None:
        ve = ve * ve_factor
    out = (v - dt_dx * v * (v - v_up) + p.dt_model * (ve - v) / p.tau
           - dt_dx * p.c0_sq * (rho_dn - rho) / (rho + p.epsilon))
    if rho_lc is not None:
        out = out + rho_lc * v_lc * (v_lc - v) / (rho + p.epsilon) * dt_dx
    return out


def _clamp(arr: np.ndarray, hi: float) -> tuple[np.ndarray, int]:
    out = np.clip(arr, 0.0, hi)
    return out, int(np.count_nonzero(out != arr))


def injection_arrays(inj: Iterable[LcInjection], lanes: int, cells: int):
    """Dense ``(rho_lc, v_lc)`` arrays; None when there are no injections.

    Several injections on one cell are merged: densities add, the speed is the
    flow-weighted mean.
    """
    inj = list(inj)
    if not inj:
        return None, None
    rho_lc = np.zeros((lanes, cells))
    flow = np.zeros((lanes, cells))
    for e in inj:
        if not (0 <= e.lane < lanes and 0 <= e.cell < cells):
            raise IndexError(f"injection outside field: lane {e.lane} cell {e.cell}")
        rho_lc[e.lane, e.cell] += e.rho_lc
        flow[e.lane, e.cell] += e.rho_lc * e.v_lc
    with np.errstate(invalid="ignore", divide="ignore"):
        v_lc = np.where(rho_lc != 0.0, flow / np.where(rho_lc != 0.0, rho_lc, 1.0), 0.0)
    return rho_lc, v_lc


def _check_cfl(p: PwParams) -> None:
    if p.v0 * p.dt_model > p.dx * (1 + 1e-12):
        log.warning("CFL violated: v0*dt=%.3f > dx=%.3f", p.v0 * p.dt_model, p.dx)


def step_density(field: CellField, inj: Sequence[LcInjection], p: PwParams,
                 boundary: Boundary = OPEN) -> CellField:
    _check_cfl(p)
    rho_lc, v_lc = injection_arrays(inj, field.lanes, field.cells_per_lane)
    rho, n = _clamp(density_update(field.rho, field.v, rho_lc, v_lc, p, boundary), p.rho_jam)
    return CellField(rho, field.v.copy(), None, n)


def step_speed(field: CellField, inj: Sequence[LcInjection], p: PwParams,
               boundary: Boundary = OPEN) -> CellField:
    rho_lc, v_lc = injection_arrays(inj, field.lanes, field.cells_per_lane)
    v, n = _clamp(speed_update(field.rho, field.v, rho_lc, v_lc, p, boundary, field.ve_factor), p.v0)
    return CellField(field.rho.copy(), v, None, n)


def pw_step(field: CellField, inj: Sequence[LcInjection], p: PwParams,
            boundary: Boundary = OPEN) -> CellField:
    """Density and speed both advanced from the same state at ``t``."""
    _check_cfl(p)
    rho_lc, v_lc = injection_arrays(inj, field.lanes, field.cells_per_lane)
    rho, n1 = _clamp(density_update(field.rho, field.v, rho_lc, v_lc, p, boundary), p.rho_jam)
    v, n2 = _clamp(speed_update(field.rho, field.v, rho_lc, v_lc, p, boundary, field.ve_factor), p.v0)
    return CellField(rho, v, None, n1 + n2)


def red_ramp(p: PwParams, cells: int, sig_cell: int) -> np.ndarray:
    """Linear ``Ve`` multiplier: 0 at the signal cell, 1 at ``red_influence_cells`` upstream."""
    factor = np.ones(cells)
    n = p.red_influence_cells
    for k in range(n):
        j = sig_cell - k
        if 0 <= j < cells:
            factor[j] = k / n
    return factor


def apply_signal_boundary(field: CellField, sig: SignalSchedule | None, t: float,
                          p: PwParams) -> CellField:
    """Red phase: zero speed at the signal cell and a linear ``Ve`` ramp upstream of it."""
    if sig is None or not sig.is_red(t):
        return field
    j = signal_cell(sig, p)
    if not 0 <= j < field.cells_per_lane:
        raise ValueError("signal lies outside the cell grid")
    v = field.v.copy()
    v[..., j] = 0.0
    return replace(field, v=v, ve_factor=red_ramp(p, field.cells_per_lane, j))


def propagate(field: CellField, injections_by_step: Sequence[Sequence[LcInjection]] | None,
              sig: SignalSchedule | None, horizon_steps: int, p: PwParams, t0: float = 0.0,
              boundary: Boundary = OPEN) -> list[CellField]:
    """``[field, f_1, ..., f_H]``: the input followed by each predicted state."""
    out = [field]
    cur = field
    for k in range(horizon_steps):
        inj = injections_by_step[k] if injections_by_step is not None and k < len(injections_by_step) else ()
        cur = pw_step(apply_signal_boundary(cur, sig, t0 + k * p.dt_model, p), inj, p, boundary)
        out.append(cur)
    return out


def propagate_arrays(rho: np.ndarray, v: np.ndarray, p: PwParams, sig: SignalSchedule | None,
                     t0: float, steps: int = 1, boundary: Boundary = OPEN,
                     rho_lc: np.ndarray | None = None, v_lc: np.ndarray | None = None,
                     dt: float | None = None):
    """Batched propagation without bookkeeping (used for sigma points)."""
    if dt is not None and dt != p.dt_model:
        p = replace(p, dt_model=dt)
    for k in range(steps):
        t = t0 + k * p.dt_model
        vf = None
        if sig is not None and sig.is_red(t):
            j = signal_cell(sig, p)
            v = v.copy()
            v[..., j] = 0.0
            vf = red_ramp(p, rho.shape[-1], j)
        lc_r = rho_lc if k == 0 else None
        lc_v = v_lc if k == 0 else None
        rho_n = np.clip(density_update(rho, v, lc_r, lc_v, p, boundary), 0.0, p.rho_jam)
        v = np.clip(speed_update(rho, v, lc_r, lc_v, p, boundary, vf), 0.0, p.v0)
        rho = rho_n
    return rho, v


# --- measurement equations --------------------------------------------------

def interpolation_coords(position, dx: float, cells: int):
    """Left cell index and weight for cell-centred linear interpolation.

    Cell ``j`` has its centre at ``(j + 0.5) dx``; a position on a centre gives weight 0.
    Positions beyond the outer centres are held at the end cell.
    """
    s = np.asarray(position, dtype=float) / dx - 0.5
    j = np.floor(s).astype(int)
    lam = s - j
    low = j < 0
    j = np.where(low, 0, j)
    lam = np.where(low, 0.0, lam)
    high = j >= cells - 1
    j = np.where(high, cells - 2, j)
    lam = np.where(high, 1.0, lam)
    return j, lam


def measure_speed(position: float, field: CellField, lane: int, dx: float, noise_std: float = 0.0,
                  rng: np.random.Generator | None = None) -> float:
    j, lam = interpolation_coords(position, dx, field.cells_per_lane)
    j, lam = int(j), float(lam)
    v = field.v[lane]
    y = lam * v[j + 1] + (1.0 - lam) * v[j]
    if noise_std > 0:
        y += (rng or np.random.default_rng()).normal(0.0, noise_std)
    return float(y)


def measure_spacing(midpoint: float, field: CellField, lane: int, dx: float, noise_std: float = 0.0,
                    rng: np.random.Generator | None = None, rho_floor: float = 1e-3):
    """Inverse-density interpolation; ``NO_VEHICLE_AHEAD`` when both cells are empty."""
    j, beta = interpolation_coords(midpoint, dx, field.cells_per_lane)
    j, beta = int(j), float(beta)
    rho = field.rho[lane]
    if rho[j] <= 0.0 and rho[j + 1] <= 0.0:
        return NO_VEHICLE_AHEAD
    y = beta / max(rho[j + 1], rho_floor) + (1.0 - beta) / max(rho[j], rho_floor)
    if noise_std > 0:
        y += (rng or np.random.default_rng()).normal(0.0, noise_std)
    return float(y)


def cell_centres(cells: int, dx: float) -> np.ndarray:
    return (np.arange(cells) + 0.5) * dx
