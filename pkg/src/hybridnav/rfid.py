"""Passive-RFID sensing: RSSI aggregation, range and angle models.

Distances come from inverting a calibrated RSSI/distance curve, either
log-distance or linear.  Orientation comes from the RSSI difference
between two tags mounted a known baseline apart on the same side of the
agent: positive angles are clockwise yaw seen from above, and at positive
angles the leading (left-hand) tag reads stronger.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import (DegenerateFitError, DomainError, InconsistentMeasurementError,
                     InsufficientDataError, OutOfRangeError)
from .geo import LocalPosition

# 10 s interrogation windows returned no fewer than 80 readings
DEFAULT_WINDOW_S = 10.0
DEFAULT_MIN_COUNT = 80
# 20 s calibration averages held over 100 readings
CALIBRATION_WINDOW_S = 20.0
CALIBRATION_MIN_COUNT = 100

DEFAULT_RATE_HZ = 8.0
ANGLE_LIMIT_DEG = 45.0
TAG_BASELINE_M = 0.40

_RANGE_RTOL = 1e-9


@dataclass(frozen=True)
class RssiReading:
    tag_id: str
    antenna_id: str
    rssi_dbm: float
    t: float


@dataclass(frozen=True)
class RssiAggregate:
    mean_dbm: float
    q1_dbm: float
    median_dbm: float
    q3_dbm: float
    min_dbm: float
    max_dbm: float
    count: int

    @property
    def iqr_db(self) -> float:
        return self.q3_dbm - self.q1_dbm


def aggregate(readings: Sequence[RssiReading], window_s: float = DEFAULT_WINDOW_S,
              min_count: int = DEFAULT_MIN_COUNT, t_end: Optional[float] = None) -> RssiAggregate:
    """Summary statistics over readings with ``t_end - window_s < t <= t_end``.

    ``t_end`` defaults to the newest reading.  Quartiles use linear
    interpolation between order statistics.
    """
    if readings:
        keys = {(r.tag_id, r.antenna_id) for r in readings}
        if len(keys) > 1:
            raise DomainError(f"readings mix tag/antenna pairs: {sorted(keys)}")
        if t_end is None:
            t_end = max(r.t for r in readings)
    x = np.array([r.rssi_dbm for r in readings if t_end - window_s < r.t <= t_end], dtype=float)
    return aggregate_values(x, min_count)


def aggregate_values(x, min_count: int = DEFAULT_MIN_COUNT) -> RssiAggregate:
    x = np.asarray(x, dtype=float)
    if x.size < max(min_count, 1):
        raise InsufficientDataError(f"{x.size} readings in window, need {min_count}")
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite RSSI reading")
    q1, med, q3 = np.percentile(x, [25.0, 50.0, 75.0])
    lo, hi = float(x.min()), float(x.max())
    mean = float(np.clip(x.mean(), lo, hi))
    return RssiAggregate(mean, float(q1), float(med), float(q3), lo, hi, int(x.size))


class ModelKind(str, enum.Enum):
    LOG_DISTANCE = "LOG_DISTANCE"
    LINEAR = "LINEAR"


@dataclass(frozen=True)
class PathLossModel:
    """RSSI as a function of distance.

    LOG_DISTANCE: ``rssi = a0_dbm - 10 * n * log10(d)`` (a0 at 1 m).
    LINEAR: ``rssi = intercept_dbm + slope_dbm_per_m * d``.
    """

    kind: ModelKind
    a0_dbm: float = 0.0
    n: float = 0.0
    intercept_dbm: float = 0.0
    slope_dbm_per_m: float = 0.0
    valid_range_m: tuple[float, float] = (0.1, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "valid_range_m", tuple(float(v) for v in self.valid_range_m))
        lo, hi = self.valid_range_m
        if not lo < hi:
            raise DomainError(f"valid range {self.valid_range_m!r} is empty")
        if self.kind is ModelKind.LOG_DISTANCE:
            if not self.n > 0:
                raise DomainError("path-loss exponent must be positive")
            if lo <= 0:
                raise DomainError("log-distance valid range must start above 0 m")
        elif not self.slope_dbm_per_m < 0:
            raise DomainError("linear model slope must be negative")

    @classmethod
    def log_distance(cls, a0_dbm, n, valid_range_m=(0.1, 10.0)):
        return cls(ModelKind.LOG_DISTANCE, a0_dbm=a0_dbm, n=n, valid_range_m=valid_range_m)

    @classmethod
    def linear(cls, intercept_dbm, slope_dbm_per_m, valid_range_m=(0.0, 3.0)):
        return cls(ModelKind.LINEAR, intercept_dbm=intercept_dbm, slope_dbm_per_m=slope_dbm_per_m,
                   valid_range_m=valid_range_m)

    def rssi(self, distance_m):
        """Forward map; accepts scalars or arrays."""
        d = np.asarray(distance_m, dtype=float)
        if self.kind is ModelKind.LOG_DISTANCE:
            out = self.a0_dbm - 10.0 * self.n * np.log10(d)
        else:
            out = self.intercept_dbm + self.slope_dbm_per_m * d
        return float(out) if out.ndim == 0 else out

    def distance_per_db(self, distance_m: float) -> float:
        """|d distance / d rssi| at ``distance_m``."""
        if self.kind is ModelKind.LOG_DISTANCE:
            return distance_m * math.log(10.0) / (10.0 * self.n)
        return 1.0 / abs(self.slope_dbm_per_m)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "valid_range_m": list(self.valid_range_m)}
        if self.kind is ModelKind.LOG_DISTANCE:
            d.update(a0_dbm=self.a0_dbm, n=self.n)
        else:
            d.update(intercept_dbm=self.intercept_dbm, slope_dbm_per_m=self.slope_dbm_per_m)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PathLossModel":
        kind = ModelKind(d["kind"])
        rng = tuple(d["valid_range_m"])
        if kind is ModelKind.LOG_DISTANCE:
            return cls.log_distance(float(d["a0_dbm"]), float(d["n"]), rng)
        return cls.linear(float(d["intercept_dbm"]), float(d["slope_dbm_per_m"]), rng)


def fit_path_loss(calib: Sequence[tuple[float, float]], kind=ModelKind.LOG_DISTANCE) -> PathLossModel:
    """Least-squares fit of (distance_m, mean_rssi_dbm) calibration points."""
    kind = ModelKind(kind)
    pts = np.asarray(calib, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise DegenerateFitError("need at least 2 calibration points")
    d, y = pts[:, 0], pts[:, 1]
    if not np.all(np.isfinite(pts)):
        raise DomainError("non-finite calibration value")
    if kind is ModelKind.LOG_DISTANCE and np.any(d <= 0):
        raise DomainError("log-distance calibration needs distances > 0")
    if np.ptp(d) == 0:
        raise DegenerateFitError("all calibration points share one distance")
    x = -10.0 * np.log10(d) if kind is ModelKind.LOG_DISTANCE else d
    X = np.column_stack([np.ones_like(x), x])
    (c0, c1), *_ = np.linalg.lstsq(X, y, rcond=None)
    span = (float(d.min()), float(d.max()))
    if kind is ModelKind.LOG_DISTANCE:
        if not c1 > 0:
            raise DegenerateFitError(f"fitted path-loss exponent {c1:.3g} is not positive")
        return PathLossModel.log_distance(float(c0), float(c1), span)
    if not c1 < 0:
        raise DegenerateFitError(f"fitted slope {c1:.3g} dB/m does not decrease with distance")
    return PathLossModel.linear(float(c0), float(c1), span)


def rssi_to_distance(rssi_dbm: float, model: PathLossModel, clamp: bool = False) -> float:
    """Invert ``model``.  Outside the calibrated span this raises
    ``OutOfRangeError`` unless ``clamp`` is set."""
    if model.kind is ModelKind.LOG_DISTANCE:
        d = 10.0 ** ((model.a0_dbm - rssi_dbm) / (10.0 * model.n))
    else:
        d = (rssi_dbm - model.intercept_dbm) / model.slope_dbm_per_m
    lo, hi = model.valid_range_m
    tol = _RANGE_RTOL * max(abs(lo), abs(hi), 1.0)
    if not (lo - tol <= d <= hi + tol):
        if clamp:
            return min(max(d, lo), hi)
        raise OutOfRangeError(f"{rssi_dbm} dBm maps to {d:.4g} m, outside {model.valid_range_m}")
    return min(max(d, lo), hi)


def dual_antenna_position(agg_a: RssiAggregate, agg_b: RssiAggregate, baseline_m: float,
                          model: PathLossModel, floor_m: float = 0.0,
                          clamp: bool = False) -> tuple[float, float]:
    """Position along the segment from antenna A to antenna B.

    Each antenna implies a position; the estimate is their mean and the
    uncertainty half their disagreement plus ``floor_m``.
    """
    if not baseline_m > 0:
        raise DomainError("baseline must be positive")
    d_a = rssi_to_distance(agg_a.mean_dbm, model, clamp=clamp)
    d_b = rssi_to_distance(agg_b.mean_dbm, model, clamp=clamp)
    return combine_antenna_distances(d_a, d_b, baseline_m, floor_m, clamp=clamp)


def combine_antenna_distances(d_a: float, d_b: float, baseline_m: float, floor_m: float = 0.0,
                              clamp: bool = False) -> tuple[float, float]:
    from_b = baseline_m - d_b
    pos = 0.5 * (d_a + from_b)
    unc = 0.5 * abs(d_a - from_b) + floor_m
    if not 0.0 <= pos <= baseline_m:
        if not clamp:
            raise InconsistentMeasurementError(
                f"antennas imply position {pos:.3f} m outside [0, {baseline_m}]")
        pos = min(max(pos, 0.0), baseline_m)
    return pos, unc


@dataclass(frozen=True)
class AngleModel:
    """Linear differential-RSSI model: ``delta = slope * angle + intercept``."""

    slope_dbm_per_deg: float
    intercept_dbm: float = 0.0
    valid_range_deg: tuple[float, float] = (-ANGLE_LIMIT_DEG, ANGLE_LIMIT_DEG)
    tag_baseline_m: float = TAG_BASELINE_M

    def __post_init__(self):
        if self.slope_dbm_per_deg == 0 or not math.isfinite(self.slope_dbm_per_deg):
            raise DomainError("angle model slope must be non-zero")
        if not self.tag_baseline_m > 0:
            raise DomainError("tag baseline must be positive")
        object.__setattr__(self, "valid_range_deg", tuple(float(v) for v in self.valid_range_deg))

    def delta(self, angle_deg):
        return self.slope_dbm_per_deg * np.asarray(angle_deg, dtype=float) + self.intercept_dbm

    def to_dict(self) -> dict:
        return {"kind": "ANGLE", "slope_dbm_per_deg": self.slope_dbm_per_deg,
                "intercept_dbm": self.intercept_dbm, "valid_range_deg": list(self.valid_range_deg),
                "tag_baseline_m": self.tag_baseline_m}

    @classmethod
    def from_dict(cls, d: dict) -> "AngleModel":
        return cls(float(d["slope_dbm_per_deg"]), float(d["intercept_dbm"]),
                   tuple(d.get("valid_range_deg", (-ANGLE_LIMIT_DEG, ANGLE_LIMIT_DEG))),
                   float(d.get("tag_baseline_m", TAG_BASELINE_M)))


def fit_angle_model(calib: Sequence[tuple[float, float]], baseline_m: float = TAG_BASELINE_M,
                    min_span_deg: float = 20.0) -> AngleModel:
    pts = np.asarray(calib, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise DegenerateFitError("need at least 2 calibration points")
    a, y = pts[:, 0], pts[:, 1]
    if np.ptp(a) < min_span_deg:
        raise DegenerateFitError(f"calibration spans {np.ptp(a):.1f} deg, need {min_span_deg}")
    # centred regression keeps antisymmetric data at an exactly zero intercept
    am, ym = a.mean(), y.mean()
    slope = float(np.sum((a - am) * (y - ym)) / np.sum((a - am) ** 2))
    intercept = float(ym - slope * am)
    if slope == 0:
        raise DegenerateFitError("RSSI difference does not vary with angle")
    return AngleModel(slope, intercept, tag_baseline_m=baseline_m)


def delta_rssi_to_angle(delta_dbm: float, model: AngleModel) -> float:
    angle = (delta_dbm - model.intercept_dbm) / model.slope_dbm_per_deg
    lo, hi = model.valid_range_deg
    if not lo <= angle <= hi:
        raise OutOfRangeError(f"{delta_dbm} dB maps to {angle:.2f} deg, outside [{lo}, {hi}]")
    return angle


@dataclass(frozen=True)
class Tag:
    """A passive tag at a body-frame offset (forward, right) from the agent centre."""

    tag_id: str
    forward_m: float = 0.0
    right_m: float = 0.0


def tag_pair(baseline_m: float = TAG_BASELINE_M, forward_m: float = 0.0) -> tuple[Tag, Tag]:
    """Leading (left) and trailing (right) tags on the antenna-facing side."""
    return (Tag("L", forward_m, -baseline_m / 2), Tag("R", forward_m, baseline_m / 2))


def relative_angle_deg(agent_pos: LocalPosition, agent_yaw_deg: float, antenna_pos: LocalPosition) -> float:
    """Agent heading relative to the direction from agent to antenna, in (-180, 180]."""
    de = antenna_pos.east_m - agent_pos.east_m
    dn = antenna_pos.north_m - agent_pos.north_m
    bearing = math.degrees(math.atan2(de, dn))
    return wrap_deg(agent_yaw_deg - bearing)


def wrap_deg(a: float) -> float:
    """Wrap to (-180, 180]."""
    w = math.fmod(a, 360.0)
    if w > 180.0:
        w -= 360.0
    elif w <= -180.0:
        w += 360.0
    return w


def _tag_world(agent_pos: LocalPosition, yaw_deg: float, tag: Tag) -> np.ndarray:
    # compass heading: yaw 0 faces north, positive yaw turns clockwise
    y = math.radians(yaw_deg)
    fwd = np.array([math.sin(y), math.cos(y)])
    right = np.array([math.cos(y), -math.sin(y)])
    xy = np.array([agent_pos.east_m, agent_pos.north_m]) + tag.forward_m * fwd + tag.right_m * right
    return np.array([xy[0], xy[1], agent_pos.up_m])


NoiseSpec = Union[float, Callable[[float], float]]


def expected_rssi(agent_pos: LocalPosition, agent_yaw: float, antenna_pos: LocalPosition,
                  tags: Sequence[Tag], model: PathLossModel,
                  angle_model: Optional[AngleModel] = None) -> list[tuple[float, float]]:
    """Noise-free (rssi_dbm, distance_m) per tag.

    Without ``angle_model`` each tag follows its own geometric distance.
    With one, the distance term is taken at the agent centre and the first
    two tags get +/- half the modelled RSSI difference for the current
    relative angle (the first tag leads).
    """
    ant = antenna_pos.as_array()
    if angle_model is None:
        out = []
        for tag in tags:
            d = float(np.linalg.norm(_tag_world(agent_pos, agent_yaw, tag) - ant))
            out.append((model.rssi(max(d, 1e-6)), d))
        return out
    d0 = float(np.linalg.norm(agent_pos.as_array() - ant))
    theta = relative_angle_deg(agent_pos, agent_yaw, antenna_pos)
    half = 0.5 * float(angle_model.delta(theta))
    base = model.rssi(max(d0, 1e-6))
    signs = [1.0, -1.0] + [0.0] * max(0, len(tags) - 2)
    return [(base + signs[i] * half, d0) for i in range(len(tags))]


def simulate_backscatter(agent_pos: LocalPosition, agent_yaw: float, antenna_pos: LocalPosition,
                         tags: Sequence[Tag], model: PathLossModel,
                         angle_model: Optional[AngleModel] = None, rate_hz: float = DEFAULT_RATE_HZ,
                         duration_s: float = DEFAULT_WINDOW_S, noise: NoiseSpec = 0.0, seed=None,
                         antenna_id: str = "A", t0: float = 0.0) -> list[RssiReading]:
    """Reading stream from one antenna for a stationary agent.

    Every tag is read once per ``1 / rate_hz`` seconds.  ``noise`` is a dB
    sigma, or a callable mapping tag distance to a dB sigma.
    """
    rng = np.random.default_rng(seed)
    n = int(round(rate_hz * duration_s))
    times = t0 + np.arange(1, n + 1) / rate_hz
    means = expected_rssi(agent_pos, agent_yaw, antenna_pos, tags, model, angle_model)
    sig = [float(noise(d)) if callable(noise) else float(noise) for _, d in means]
    eps = rng.standard_normal((n, len(tags)))
    out: list[RssiReading] = []
    for k in range(n):
        for j, tag in enumerate(tags):
            out.append(RssiReading(tag.tag_id, antenna_id, float(means[j][0] + sig[j] * eps[k, j]),
                                   float(times[k])))
    return out


def db_sigma_for_distance_sd(model: PathLossModel, distance_m: float, distance_sd_m: float) -> float:
    """Per-reading dB sigma whose single-reading distance estimate has ``distance_sd_m``."""
    return distance_sd_m / model.distance_per_db(distance_m)


def read_calibration_csv(fh) -> tuple[str, list[tuple[float, float]]]:
    """Return ('distance' | 'angle', points) from a calibration CSV."""
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise DomainError("empty calibration file")
    header = tuple(h.strip() for h in header)
    if header == ("distance_m", "mean_rssi_dbm"):
        what = "distance"
    elif header == ("angle_deg", "delta_rssi_dbm"):
        what = "angle"
    else:
        raise DomainError(f"unrecognised calibration header {','.join(header)}")
    pts = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise DomainError(f"line {lineno}: expected 2 fields")
        try:
            pts.append((float(row[0]), float(row[1])))
        except ValueError:
            raise DomainError(f"line {lineno}: non-numeric value") from None
    return what, pts


def model_to_json(model) -> str:
    return json.dumps(model.to_dict(), indent=2)


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("kind") == "ANGLE":
        return AngleModel.from_dict(d)
    return PathLossModel.from_dict(d)
