"""Parameter bundles and scenario-file loading.

All quantities are SI internally (veh/m, m/s, m, s).  Values quoted per km in
scenario files (``rho_jam_veh_per_km``) are converted when the file is parsed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration."""


def _require_positive(obj: Any, *names: str) -> None:
    for name in names:
        if not getattr(obj, name) > 0:
            raise ConfigError(f"{type(obj).__name__}.{name} must be > 0, got {getattr(obj, name)!r}")


@dataclass(frozen=True)
class PwParams:
    """Constants of the lane-change-aware Payne-Whitham cell model."""

    dt_model: float = 1.0
    dx: float = 15.0
    v0: float = 15.0
    rho_jam: float = 0.130
    c_slope: float = 10.14
    tau: float = 1.0
    c0_sq: float = 54.0
    # veh/m; smaller values let the pressure term blow up at the edge of empty cells
    epsilon: float = 0.013
    red_influence_cells: int = 6

    def __post_init__(self) -> None:
        _require_positive(self, "dt_model", "dx", "v0", "rho_jam", "c_slope", "tau", "c0_sq",
                          "red_influence_cells")
        if self.epsilon < 1e-9:
            raise ConfigError("epsilon must be >= 1e-9")
        if self.rho_jam * self.dx < 1.0:
            raise ConfigError("rho_jam * dx must be >= 1 (a cell holds at least one vehicle)")

    @property
    def rho_c(self) -> float:
        return self.rho_jam / (self.v0 / self.c_slope + 1.0)


@dataclass(frozen=True)
class UkfConfig:
    process_noise_rho: float = 0.004 ** 2
    process_noise_v: float = 5.0 ** 2
    meas_noise_v: float = 0.5 ** 2
    meas_noise_d: float = 2.0 ** 2
    sigma_point_spread: float = 0.1
    beta: float = 2.0
    init_std_rho: float = 0.02
    init_std_v: float = 3.0
    # spatial correlation length of the speed process noise (cells); 0 keeps it diagonal
    process_noise_corr_cells: float = 4.0
    # floor on density inside the spacing measurement model (veh/m)
    spacing_rho_floor: float = 1.0 / 200.0

    def __post_init__(self) -> None:
        _require_positive(self, "process_noise_rho", "process_noise_v", "meas_noise_v",
                          "meas_noise_d", "sigma_point_spread", "init_std_rho", "init_std_v",
                          "spacing_rho_floor")
        if self.process_noise_corr_cells < 0:
            raise ConfigError("ukf.process_noise_corr_cells must be >= 0")


@dataclass(frozen=True)
class LcParams:
    threshold: float = 2.5
    horizon_s: float = 5.0
    reaction_tau: float = 1.0
    max_decel_b: float = 4.5
    v_max_lane: float = 15.0
    lc_duration_s: float = 1.0
    min_gap: float = 2.5
    veh_length: float = 5.0
    # occupied-cell test: rho*dx >= occupancy_fraction
    occupancy_fraction: float = 0.5
    leader_scan_cells: int = 6
    # False: threshold tested on the predicted cumulative sum alone (printed
    # worked-example convention); True: current memory is added first.
    add_prior_memory: bool = False

    def __post_init__(self) -> None:
        _require_positive(self, "threshold", "horizon_s", "reaction_tau", "max_decel_b",
                          "v_max_lane", "lc_duration_s", "veh_length", "leader_scan_cells")
        if self.min_gap < 0:
            raise ConfigError("min_gap must be >= 0")


@dataclass(frozen=True)
class VehicleDynParams:
    m_t: float = 1550.0
    k_m: float = 1.1
    cd_a: float = 0.66
    c_rr: float = 0.008
    rho_air: float = 1.2
    g: float = 9.81
    grade: float = 0.0

    def __post_init__(self) -> None:
        _require_positive(self, "m_t", "k_m", "cd_a", "c_rr", "rho_air", "g")
        if not -0.2 <= self.grade <= 0.2:
            raise ConfigError("grade must lie in [-0.2, 0.2]")


# Literal rolling-resistance value from the source parameter table, selectable via
# ``c_rr: as_printed``.  The physical default above is 0.008.
C_RR_AS_PRINTED = 0.8


@dataclass(frozen=True)
class ControlConfig:
    horizon_s: float = 10.0
    dt_ctrl: float = 0.5
    replan_period: float = 1.0
    apply_steps: int = 2
    v_min: float = 0.0
    v_max: float = 15.0
    a_min: float = -4.5
    a_max: float = 2.6
    d_min: float = 2.5
    d_max: float = 75.0
    h_min: float = 1.5
    beta_conf: float = 1.0
    w1: float = 3000.0
    w2: float = 150.0
    w3: float = 150.0
    w4: float = 150.0
    spat_range: float = 350.0
    sigma_dp_fallback: float = 2.0
    sigma_dp_cap: float = 5.0
    green_ramp_rate: float = 3.0
    max_iter: int = 100
    relinearize_tol: float = 0.01
    max_relinearizations: int = 6
    # only forecasts for vehicles whose position is reported switch the reference vehicle
    cut_in_identified_only: bool = True

    def __post_init__(self) -> None:
        _require_positive(self, "horizon_s", "dt_ctrl", "replan_period", "apply_steps", "v_max",
                          "a_max", "w1", "w2", "w3", "w4", "spat_range")
        n = self.horizon_s / self.dt_ctrl
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("horizon_s must be a multiple of dt_ctrl")
        if max(self.w3, self.w4) > 0.05 * max(self.w1, self.w2) + 1e-12:
            raise ConfigError("slack weights are capped at 5% of the decision-variable weights")
        if self.a_min >= 0:
            raise ConfigError("a_min must be negative")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.dt_ctrl))


@dataclass(frozen=True)
class VehicleType:
    name: str
    length: float = 5.0
    min_gap: float = 2.5
    max_decel: float = 4.5
    max_accel: float = 2.6
    headway: float = 1.0
    imperfection: float = 0.5
    v_max: float = 15.0


def vehicle_types(profile: str = "as_printed", slow_v_max: float = 8.0) -> dict[str, VehicleType]:
    """Vehicle-type table.  ``text_consistent`` lowers CV imperfection to 0.1."""
    if profile not in ("as_printed", "text_consistent"):
        raise ConfigError(f"unknown vehicle profile {profile!r}")
    cv_imp = 1.0 if profile == "as_printed" else 0.1
    return {
        "HV": VehicleType("HV", headway=1.0, imperfection=0.5),
        "CV": VehicleType("CV", headway=0.9, imperfection=cv_imp),
        "slow_HV": VehicleType("slow_HV", headway=1.0, imperfection=0.5, v_max=slow_v_max),
        "bus": VehicleType("bus", max_decel=3.0, headway=1.0, imperfection=0.5),
        "target_CAV": VehicleType("target_CAV", headway=0.9, imperfection=0.0),
    }


@dataclass(frozen=True)
class NetworkSpec:
    lanes: int = 2
    pre_range: float = 150.0
    range_to_signal: float = 350.0
    post_signal: float = 350.0
    v_max: float = 15.0
    spat_range: float = 350.0

    def __post_init__(self) -> None:
        _require_positive(self, "lanes", "range_to_signal", "post_signal", "v_max", "spat_range")
        if self.pre_range < 0:
            raise ConfigError("pre_range must be >= 0")

    @property
    def length(self) -> float:
        return self.pre_range + self.range_to_signal + self.post_signal

    @property
    def signal_position(self) -> float:
        return self.pre_range + self.range_to_signal


@dataclass(frozen=True)
class SignalSpec:
    green: float = 20.0
    yellow: float = 2.0
    red: float = 20.0
    offset: float = 0.0
    yellow_policy: str = "part_of_red"
    enabled: bool = True


@dataclass(frozen=True)
class DemandSpec:
    volume_per_lane: tuple[float, ...] = (1300.0, 1300.0)
    departure_window: float = 50.0
    mpr: float = 0.7
    slow_vehicle_period: float = 60.0
    slow_vehicle_offset: float = 0.0
    slow_v_max: float = 8.0
    seed: int = 0
    with_target: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.mpr <= 1.0:
            raise ConfigError("mpr must lie in [0, 1]")
        for vol in self.volume_per_lane:
            if vol < 0 or vol > 2400:
                raise ConfigError(f"volume {vol} outside the supported range [0, 2400]")
        _require_positive(self, "departure_window", "slow_vehicle_period")


@dataclass(frozen=True)
class SimConfig:
    dt_sim: float = 0.5
    t_max: float = 200.0
    vehicle_profile: str = "as_printed"
    meas_noise_v_std: float = 0.5
    meas_noise_d_std: float = 1.0
    stop_after_target_exit: bool = True
    # benefit threshold used by simulated drivers (the forecaster has its own)
    lc_threshold: float = 2.5
    # a CV sees its leader only within this front-to-front distance
    sensor_range: float = 150.0

    def __post_init__(self) -> None:
        _require_positive(self, "dt_sim", "t_max", "lc_threshold", "sensor_range")
        if self.vehicle_profile not in ("as_printed", "text_consistent"):
            raise ConfigError(f"unknown vehicle profile {self.vehicle_profile!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to run one seeded scenario in one arm."""

    network: NetworkSpec = field(default_factory=NetworkSpec)
    signal: SignalSpec = field(default_factory=SignalSpec)
    demand: DemandSpec = field(default_factory=DemandSpec)
    pw: PwParams = field(default_factory=PwParams)
    ukf: UkfConfig = field(default_factory=UkfConfig)
    lc: LcParams = field(default_factory=LcParams)
    dyn: VehicleDynParams = field(default_factory=VehicleDynParams)
    control: ControlConfig = field(default_factory=ControlConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    mode: str = "lc"  # "lc" | "baseline"

    def with_(self, **sections: Any) -> "ScenarioConfig":
        """Return a copy with nested fields replaced, e.g. ``with_(demand={"seed": 3})``."""
        updates = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                updates[name] = dataclasses.replace(getattr(self, name), **value)
            else:
                updates[name] = value
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SECTIONS = {
    "network": NetworkSpec,
    "signal": SignalSpec,
    "demand": DemandSpec,
    "pw": PwParams,
    "ukf": UkfConfig,
    "lc": LcParams,
    "dyn": VehicleDynParams,
    "control": ControlConfig,
    "sim": SimConfig,
}


def _build_section(cls: type, raw: dict[str, Any], section: str) -> Any:
    raw = dict(raw or {})
    if section == "pw" and "rho_jam_veh_per_km" in raw:
        raw["rho_jam"] = float(raw.pop("rho_jam_veh_per_km")) / 1000.0
    if section == "dyn" and raw.get("c_rr") == "as_printed":
        raw["c_rr"] = C_RR_AS_PRINTED
    if section == "demand" and "volume_per_lane" in raw:
        vol = raw["volume_per_lane"]
        raw["volume_per_lane"] = tuple(float(v) for v in (vol if isinstance(vol, (list, tuple)) else [vol, vol]))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def scenario_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must contain a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"mode"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    kwargs: dict[str, Any] = {name: _build_section(cls, raw.get(name, {}), name)
                              for name, cls in _SECTIONS.items()}
    mode = raw.get("mode", "lc")
    if mode not in ("lc", "baseline"):
        raise ConfigError(f"mode must be 'lc' or 'baseline', got {mode!r}")
    return ScenarioConfig(mode=mode, **kwargs)


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    return scenario_from_dict(raw or {})
