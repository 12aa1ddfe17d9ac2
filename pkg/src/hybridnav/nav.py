"""Fusion layer and controllers.

The mode logic prefers UWB whenever the agent can power it and the anchor
geometry is good enough, adds RFID inside critical zones, and falls back to
RFID alone when the battery is critical.  Controllers are proportional with
a closed deadband and speed saturation.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from .errors import DomainError
from .geo import LocalPosition
from .rfid import ANGLE_LIMIT_DEG, wrap_deg

CRITICAL_BATTERY = 0.15
UWB_MIN_ANCHORS = 3
UWB_RADIO_RANGE_M = 30.0
UWB_MAX_GDOP = 6.0


class NavMode(str, enum.Enum):
    UWB_GPS = "UWB_GPS"
    HYBRID = "HYBRID"
    RFID_ONLY = "RFID_ONLY"
    UNAVAILABLE = "UNAVAILABLE"


@dataclass
class AgentState:
    pos: LocalPosition
    yaw_deg: float = 0.0
    battery_frac: float = 1.0
    uwb_powered: bool = True
    max_speed_mps: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.battery_frac <= 1.0:
            raise DomainError(f"battery fraction {self.battery_frac} outside [0, 1]")
        if self.max_speed_mps <= 0:
            raise DomainError("max speed must be positive")


@dataclass(frozen=True)
class CoverageReport:
    """What the UWB network offers at the agent's location."""

    eligible_in_range: int = 0
    gdop: float = math.inf

    def __post_init__(self):
        if self.eligible_in_range < 0:
            raise DomainError("anchor count must be >= 0")

    def usable(self, min_anchors: int = UWB_MIN_ANCHORS, max_gdop: float = UWB_MAX_GDOP) -> bool:
        return self.eligible_in_range >= min_anchors and self.gdop <= max_gdop


class ZoneKind(str, enum.Enum):
    CROSSING = "CROSSING"
    DOCK = "DOCK"


@dataclass(frozen=True)
class CriticalZone:
    kind: ZoneKind
    polygon: tuple[tuple[float, float], ...]
    antennas: tuple[LocalPosition, ...]
    _shape: Polygon = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ZoneKind(self.kind))
        object.__setattr__(self, "polygon", tuple((float(e), float(n)) for e, n in self.polygon))
        object.__setattr__(self, "antennas", tuple(self.antennas))
        if len(self.polygon) < 3:
            raise DomainError("zone polygon needs at least 3 vertices")
        shape = Polygon(self.polygon)
        if not shape.is_valid or shape.area == 0:
            raise DomainError("zone polygon must be simple with non-zero area")
        if not self.antennas:
            raise DomainError("zone needs at least one RFID antenna")
        object.__setattr__(self, "_shape", shape)

    def contains(self, pos: LocalPosition) -> bool:
        """Boundary counts as inside."""
        return self._shape.covers(Point(pos.east_m, pos.north_m))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "polygon": [list(p) for p in self.polygon],
                "antennas": [[a.east_m, a.north_m, a.up_m] for a in self.antennas]}

    @classmethod
    def from_dict(cls, d: dict) -> "CriticalZone":
        return cls(d["kind"], tuple(tuple(p) for p in d["polygon"]),
                   tuple(LocalPosition.from_array(a) for a in d["antennas"]))


def load_zone(text: str) -> CriticalZone:
    return CriticalZone.from_dict(json.loads(text))


@dataclass(frozen=True)
class PositionEstimate:
    pos: LocalPosition
    variance_m2: tuple[float, float, float]
    source: NavMode
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variance_m2", tuple(float(v) for v in self.variance_m2))
        if any(not v >= 0 for v in self.variance_m2):
            raise DomainError("variance must be non-negative")


@dataclass(frozen=True)
class ControlCommand:
    velocity_mps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_rate_dps: float = 0.0
    waypoint_reached: bool = False

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity_mps)


def select_mode(agent: AgentState, uwb_cov: CoverageReport, in_zone: bool, rfid_available: bool,
                critical_battery: float = CRITICAL_BATTERY, min_anchors: int = UWB_MIN_ANCHORS,
                max_gdop: float = UWB_MAX_GDOP) -> NavMode:
    uwb_ok = (agent.uwb_powered and agent.battery_frac >= critical_battery
              and uwb_cov.usable(min_anchors, max_gdop))
    if uwb_ok and in_zone and rfid_available:
        return NavMode.HYBRID
    if uwb_ok:
        return NavMode.UWB_GPS
    if rfid_available:
        return NavMode.RFID_ONLY
    return NavMode.UNAVAILABLE


def fuse(estimates: Sequence[PositionEstimate], source: Optional[NavMode] = None) -> PositionEstimate:
    """Per-axis inverse-variance combination.

    A zero-variance estimate is treated as ground truth and returned as is.
    ``source`` labels the result; by default it is the common source of the
    inputs, or HYBRID when they differ.
    """
    if not estimates:
        raise DomainError("nothing to fuse")
    ts = {e.t for e in estimates}
    if len(ts) > 1:
        raise DomainError(f"estimates come from different ticks: {sorted(ts)}")
    if len(estimates) == 1:
        return estimates[0]
    for e in estimates:
        if all(v == 0.0 for v in e.variance_m2):
            return e
    if source is None:
        srcs = {e.source for e in estimates}
        source = srcs.pop() if len(srcs) == 1 else NavMode.HYBRID
    P = np.array([e.pos.as_array() for e in estimates])
    V = np.array([e.variance_m2 for e in estimates])
    pos = np.empty(3)
    var = np.empty(3)
    for k in range(3):
        zero = V[:, k] == 0.0
        if zero.any():
            # an exact axis wins that axis
            pos[k] = P[zero.argmax(), k]
            var[k] = 0.0
            continue
        info = 1.0 / V[:, k]
        var[k] = 1.0 / info.sum()
        pos[k] = float(np.clip((info * P[:, k]).sum() * var[k], P[:, k].min(), P[:, k].max()))
        var[k] = min(var[k], V[:, k].min())
    return PositionEstimate(LocalPosition.from_array(pos), tuple(var), source, estimates[0].t)


def _saturate(v: np.ndarray, vmax: float) -> np.ndarray:
    n = math.hypot(*v)
    if n > vmax:
        v = v * (vmax / n)
        # keep the bound exact after rounding
        while math.hypot(*v) > vmax:
            v = v * (1.0 - 1e-15)
    return v


def waypoint_step(est: PositionEstimate, wp: tuple[LocalPosition, float], gain_per_s: float,
                  max_speed: float) -> ControlCommand:
    """Proportional step toward waypoint ``(position, radius)``."""
    target, radius = wp
    if not radius > 0:
        raise DomainError("waypoint radius must be positive")
    if not gain_per_s > 0:
        raise DomainError("gain must be positive")
    err = target.as_array() - est.pos.as_array()
    if math.hypot(*err) <= radius:
        return ControlCommand(waypoint_reached=True)
    v = _saturate(gain_per_s * err, max_speed)
    return ControlCommand(tuple(float(x) for x in v), 0.0, False)


def line_hold_step(position_on_line_m: float, target_m: float, tolerance_m: float, gain: float,
                   max_speed: float, lateral_delta_rssi_dbm: Optional[float] = None,
                   lateral_speed_mps: float = 0.1, lateral_deadband_db: float = 0.0) -> ControlCommand:
    """1-D hold along a line, in line coordinates (along, lateral, up).

    ``lateral_delta_rssi_dbm`` is RSSI(left antenna) - RSSI(right antenna)
    for the side-by-side antenna pair; a positive value means the agent sits
    left of the centre line and is pushed right (negative lateral).  Only
    its sign is used.
    """
    if not tolerance_m > 0:
        raise DomainError("tolerance must be positive")
    err = target_m - position_on_line_m
    along = 0.0
    if abs(err) > tolerance_m:
        along = max(-max_speed, min(max_speed, gain * err))
    lateral = 0.0
    if lateral_delta_rssi_dbm is not None and abs(lateral_delta_rssi_dbm) > lateral_deadband_db:
        lateral = -math.copysign(lateral_speed_mps, lateral_delta_rssi_dbm)
    v = _saturate(np.array([along, lateral, 0.0]), max_speed)
    settled = abs(err) <= tolerance_m
    return ControlCommand(tuple(float(x) for x in v), 0.0, settled)


def orientation_step(angle_est_deg: float, target_deg: float, tolerance_deg: float, gain: float,
                     max_yaw_rate: float) -> ControlCommand:
    """Proportional yaw-rate command toward ``target_deg`` (within +/-45 deg)."""
    if not -ANGLE_LIMIT_DEG <= target_deg <= ANGLE_LIMIT_DEG:
        raise DomainError(f"target {target_deg} deg outside +/-{ANGLE_LIMIT_DEG}")
    if not tolerance_deg > 0:
        raise DomainError("tolerance must be positive")
    err = wrap_deg(target_deg - angle_est_deg)
    if abs(err) <= tolerance_deg:
        return ControlCommand(waypoint_reached=True)
    rate = max(-max_yaw_rate, min(max_yaw_rate, gain * err))
    return ControlCommand((0.0, 0.0, 0.0), float(rate), False)
