"""Deterministic fixed-timestep scenario engine.

Each tick: refresh parked-car anchors, drain the battery, decide which
sources are available, pick the navigation mode, fuse the permitted
measurements with the dead-reckoned prior, run the mission controller and
integrate first-order kinematics.  Every noise source draws from its own
named stream derived from the scenario seed.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import zlib
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import gps as gps_mod
from .errors import DomainError, HybridNavError, ScenarioValidationError
from .geo import FrameOrigin, GeoPosition, LocalPosition, enu_to_geodetic
from .nav import (CRITICAL_BATTERY, AgentState, ControlCommand, CoverageReport, CriticalZone,
                  NavMode, PositionEstimate, fuse, line_hold_step, orientation_step, select_mode,
                  waypoint_step)
from .rfid import (AngleModel, OutOfRangeError, PathLossModel, combine_antenna_distances,
                   delta_rssi_to_angle, expected_rssi, rssi_to_distance,
                   tag_pair)
from .uwb import (Anchor, AnchorKind, UwbRange, gdop, multilaterate, refine_anchor_position,
                  update_car)

TRACE_HEADER = ("t_s", "true_e", "true_n", "true_u", "est_e", "est_n", "est_u", "mode", "battery",
                "cmd_e", "cmd_n", "cmd_u", "reached")
# appended after the contract columns; readers key on header names
TRACE_EXTRA = ("yaw_deg", "angle_est_deg", "in_zone", "uwb_ok", "rfid_ok")

_NUM = {"type": "number"}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POINT = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 3}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["origin", "dt_s", "duration_s", "agent", "mission"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "origin": {"type": "object", "required": ["lat_deg", "lon_deg"],
                   "properties": {"lat_deg": {"type": "number", "minimum": -90, "maximum": 90},
                                  "lon_deg": {"type": "number", "minimum": -180, "maximum": 180}}},
        "dt_s": _POS_NUM,
        "duration_s": _POS_NUM,
        "seed": {"type": "integer", "minimum": 0},
        "anchors": {"type": "array", "items": {
            "type": "object", "required": ["id", "east_m", "north_m"],
            "properties": {
                "id": {"type": "string"}, "east_m": _NUM, "north_m": _NUM, "up_m": _NUM,
                "kind": {"enum": ["FIXED", "PARKED_CAR"]},
                "eligible_threshold_s": _NONNEG,
                "schedule": {"type": "array", "items": {
                    "type": "array", "minItems": 2, "maxItems": 2,
                    "items": {"type": ["number", "null"]}}}}}},
        "zones": {"type": "array", "items": {
            "type": "object", "required": ["kind", "polygon", "antennas"],
            "properties": {"kind": {"enum": ["CROSSING", "DOCK"]},
                           "polygon": {"type": "array", "items": _POINT, "minItems": 3},
                           "antennas": {"type": "array", "items": _POINT, "minItems": 1}}}},
        "agent": {"type": "object", "required": ["east_m", "north_m"],
                  "properties": {"east_m": _NUM, "north_m": _NUM, "up_m": _NUM, "yaw_deg": _NUM,
                                 "battery_frac": {"type": "number", "minimum": 0, "maximum": 1},
                                 "max_speed_mps": _POS_NUM, "max_yaw_rate_dps": _POS_NUM}},
        "mission": {"type": "object", "required": ["type"], "properties": {
            "type": {"enum": ["waypoints", "line", "orientation"]},
            "waypoints": {"type": "array", "items": _POINT, "minItems": 1},
            "radius_m": _POS_NUM, "capture_radius_m": _POS_NUM, "gain_per_s": _POS_NUM,
            "zone": {"type": "integer", "minimum": 0},
            "target_m": _NUM, "tolerance_m": _POS_NUM, "deadband_m": _POS_NUM,
            "target_deg": {"type": "number", "minimum": -45, "maximum": 45},
            "tolerance_deg": _POS_NUM, "deadband_deg": _POS_NUM}},
        "gps": {"type": "object", "properties": {
            "interval_s": _POS_NUM, "base_sigma_m": _NONNEG,
            "hdop_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            "correlation_time_s": _POS_NUM, "hdop_median": _POS_NUM, "hdop_log_sigma": _NONNEG}},
        "uwb": {"type": "object", "properties": {
            "sigma_m": _NONNEG, "rate_hz": _POS_NUM, "radio_range_m": _POS_NUM, "max_gdop": _POS_NUM,
            "min_anchors": {"type": "integer", "minimum": 3}}},
        "rfid": {"type": "object", "properties": {
            "model": {"type": "object"}, "angle_model": {"type": ["object", "null"]},
            "noise_db": _NONNEG, "rate_hz": _POS_NUM, "window_s": _POS_NUM,
            "min_count": {"type": "integer", "minimum": 1}, "read_range_m": _POS_NUM,
            "tag_baseline_m": _POS_NUM, "lateral_sigma_m": _POS_NUM}},
        "battery": {"type": "object", "properties": {
            "critical": {"type": "number", "minimum": 0, "maximum": 1},
            "drain_per_s": _NONNEG, "drain_per_uwb_range": _NONNEG,
            "script": {"type": "array", "items": {"type": "array", "items": _NUM,
                                                  "minItems": 2, "maxItems": 2}}}},
        "estimator": {"type": "object", "properties": {
            "process_noise_m2_per_s": _POS_NUM, "initial_sigma_m": _POS_NUM}},
    },
}

_DEFAULTS = {
    "seed": 0,
    "anchors": [],
    "zones": [],
    "gps": {"interval_s": 10.0},
    "uwb": {"sigma_m": 0.10, "rate_hz": 10.0, "radio_range_m": 30.0, "max_gdop": 6.0, "min_anchors": 3},
    "rfid": {"model": {"kind": "LOG_DISTANCE", "a0_dbm": -55.0, "n": 2.0, "valid_range_m": [0.1, 8.0]},
             "angle_model": None, "noise_db": 0.44, "rate_hz": 8.0, "window_s": 2.0, "min_count": 16,
             "read_range_m": 8.0, "tag_baseline_m": 0.40, "lateral_sigma_m": 0.5},
    "battery": {"critical": CRITICAL_BATTERY, "drain_per_s": 0.0, "drain_per_uwb_range": 0.0},
    "estimator": {"process_noise_m2_per_s": 0.002, "initial_sigma_m": 0.5},
}


@dataclass
class Scenario:
    """A validated scenario; ``raw`` is the JSON document with defaults filled in."""

    raw: dict
    origin: FrameOrigin
    anchors: list
    zones: list
    mission: dict
    dt_s: float
    duration_s: float
    seed: int
    gps_model: gps_mod.GpsNoiseModel
    rfid_model: PathLossModel
    angle_model: Optional[AngleModel]

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.dt_s))

    def with_seed(self, seed: int) -> "Scenario":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return scenario_from_dict(raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2)


def _merge_defaults(d: dict) -> dict:
    out = copy.deepcopy(d)
    for k, v in _DEFAULTS.items():
        if isinstance(v, dict):
            merged = copy.deepcopy(v)
            merged.update(out.get(k) or {})
            out[k] = merged
        else:
            out.setdefault(k, copy.deepcopy(v))
    return out


def _path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate_scenario(d) -> list[str]:
    """Every violation in ``d``; an empty list means valid."""
    if not isinstance(d, dict):
        return ["<root>: scenario must be a JSON object"]
    v = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errs = [f"{_path(e)}: {e.message}" for e in sorted(v.iter_errors(d), key=lambda e: list(map(str, e.absolute_path)))]
    if errs:
        return errs
    d = _merge_defaults(d)
    ids = [a["id"] for a in d["anchors"]]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        errs.append(f"anchors: duplicate id {dup!r}")
    for i, a in enumerate(d["anchors"]):
        sched = a.get("schedule")
        if a.get("kind", "FIXED") == "FIXED" or not sched:
            continue
        prev_end = -math.inf
        for j, (park, depart) in enumerate(sched):
            where = f"anchors.{i}.schedule.{j}"
            if park is None:
                errs.append(f"{where}: park time may not be null")
                continue
            if depart is not None and depart <= park:
                errs.append(f"{where}: departure must follow parking")
            if park < prev_end:
                errs.append(f"{where}: schedule is not time-ordered")
            if depart is None and j != len(sched) - 1:
                errs.append(f"{where}: open-ended stay must be last")
            prev_end = depart if depart is not None else math.inf
    for i, z in enumerate(d["zones"]):
        try:
            _zone(z)
        except DomainError as exc:
            errs.append(f"zones.{i}: {exc}")
    m = d["mission"]
    if m["type"] == "waypoints" and not m.get("waypoints"):
        errs.append("mission.waypoints: waypoint mission needs at least one waypoint")
    if m["type"] in ("line", "orientation"):
        zi = m.get("zone", 0)
        if zi >= len(d["zones"]):
            errs.append(f"mission.zone: no zone {zi}")
        elif m["type"] == "line" and len(d["zones"][zi]["antennas"]) < 2:
            errs.append("mission.zone: line mission needs a zone with 2 antennas")
    if m["type"] == "line" and "target_m" not in m:
        errs.append("mission.target_m: required for a line mission")
    if m["type"] == "orientation":
        if "target_deg" not in m:
            errs.append("mission.target_deg: required for an orientation mission")
        if not d["rfid"].get("angle_model"):
            errs.append("rfid.angle_model: required for an orientation mission")
    try:
        PathLossModel.from_dict(d["rfid"]["model"])
    except (KeyError, TypeError, ValueError) as exc:
        errs.append(f"rfid.model: {exc}")
    if d["rfid"].get("angle_model"):
        try:
            AngleModel.from_dict(d["rfid"]["angle_model"])
        except (KeyError, TypeError, ValueError) as exc:
            errs.append(f"rfid.angle_model: {exc}")
    try:
        _gps_model(d["gps"])
    except (TypeError, ValueError) as exc:
        errs.append(f"gps: {exc}")
    script = d["battery"].get("script")
    if script:
        ts = [p[0] for p in script]
        if ts != sorted(ts):
            errs.append("battery.script: times must be increasing")
        if any(not 0 <= p[1] <= 1 for p in script):
            errs.append("battery.script: levels must lie in [0, 1]")
    return errs


def _zone(z: dict) -> CriticalZone:
    return CriticalZone.from_dict(z)


def _gps_model(g: dict) -> gps_mod.GpsNoiseModel:
    kw = {k: g[k] for k in ("base_sigma_m", "correlation_time_s", "hdop_median", "hdop_log_sigma") if k in g}
    if "hdop_range" in g:
        kw["hdop_range"] = tuple(g["hdop_range"])
    return gps_mod.GpsNoiseModel(**kw)


def scenario_from_dict(d: dict) -> Scenario:
    errs = validate_scenario(d)
    if errs:
        raise ScenarioValidationError(errs)
    d = _merge_defaults(d)
    origin = FrameOrigin(GeoPosition(d["origin"]["lat_deg"], d["origin"]["lon_deg"]))
    am = d["rfid"].get("angle_model")
    return Scenario(raw=d, origin=origin, anchors=d["anchors"], zones=[_zone(z) for z in d["zones"]],
                    mission=d["mission"], dt_s=float(d["dt_s"]), duration_s=float(d["duration_s"]),
                    seed=int(d["seed"]), gps_model=_gps_model(d["gps"]),
                    rfid_model=PathLossModel.from_dict(d["rfid"]["model"]),
                    angle_model=AngleModel.from_dict(am) if am else None)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


BUNDLED = ("waypoints", "crossing", "line", "dock")


def bundled_scenario(name: str) -> Scenario:
    text = bundled_scenario_path(name).read_text(encoding="utf-8")
    return scenario_from_dict(json.loads(text))


def bundled_scenario_path(name: str):
    return resources.files("hybridnav") / "scenarios" / f"{name}.json"


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named noise source."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()), *extra)))


# ---------------------------------------------------------------- schedule

def _car_interval(spec: dict, t: float):
    for park, depart in spec.get("schedule") or [[0.0, None]]:
        if park <= t and (depart is None or t < depart):
            return park, depart
    return None


def _anchor_pos(spec: dict) -> LocalPosition:
    return LocalPosition(float(spec["east_m"]), float(spec["north_m"]), float(spec.get("up_m", 0.0)))


def _parked_cars(s: Scenario, t: float) -> list[Anchor]:
    out = []
    for spec in s.anchors:
        if spec.get("kind", "FIXED") == "FIXED":
            continue
        iv = _car_interval(spec, t)
        if iv is None:
            continue
        a = Anchor.parked_car(spec["id"], _anchor_pos(spec), threshold_s=float(spec.get("eligible_threshold_s", 300.0)))
        out.append(update_car(update_car(a, False, iv[0]), False, t))
    return out


def car_density_schedule(s: Scenario, t: float) -> list[Anchor]:
    """Anchors present at ``t``: every fixed unit plus each car whose
    parking interval covers ``t``, with eligibility from its stationary time.
    Positions are the nominal scenario positions."""
    if not 0.0 <= t <= s.duration_s:
        raise DomainError(f"t={t} outside scenario duration")
    fixed = [Anchor(spec["id"], _anchor_pos(spec), AnchorKind.FIXED, last_update_t=t)
             for spec in s.anchors if spec.get("kind", "FIXED") == "FIXED"]
    return fixed + _parked_cars(s, t)


# ------------------------------------------------------------------ trace

@dataclass(frozen=True)
class TraceRecord:
    t: float
    true_pos: tuple
    est_pos: tuple
    mode: NavMode
    battery: float
    command: tuple
    reached: bool
    yaw_deg: float = 0.0
    angle_est_deg: float = math.nan
    in_zone: bool = False
    uwb_ok: bool = False
    rfid_ok: bool = False


@dataclass
class RunSummary:
    ticks: int
    duration_s: float
    waypoints_reached: int
    waypoint_times: list
    max_error_by_mode: dict
    mean_error_by_mode: dict
    mode_occupancy: dict
    zone_entries: list
    final_true_pos: tuple
    final_est_pos: tuple

    def to_dict(self) -> dict:
        return {
            "ticks": self.ticks, "duration_s": self.duration_s,
            "waypoints_reached": self.waypoints_reached, "waypoint_times": self.waypoint_times,
            "max_error_by_mode": self.max_error_by_mode, "mean_error_by_mode": self.mean_error_by_mode,
            "mode_occupancy": self.mode_occupancy, "zone_entries": self.zone_entries,
            "final_true_pos": list(self.final_true_pos), "final_est_pos": list(self.final_est_pos),
        }


def position_error(r: TraceRecord) -> float:
    return math.dist(r.true_pos, r.est_pos)


def summarize(trace: Sequence[TraceRecord]) -> RunSummary:
    if not trace:
        raise DomainError("cannot summarise an empty trace")
    errs: dict[str, list] = {m.value: [] for m in NavMode}
    reached_times = []
    entries = []
    prev_reached = False
    prev_zone = False
    for r in trace:
        e = position_error(r)
        errs[r.mode.value].append(e)
        if r.reached and not prev_reached:
            reached_times.append(r.t)
        if r.in_zone and not prev_zone:
            entries.append(r.t)
        prev_reached, prev_zone = r.reached, r.in_zone
    n = len(trace)
    return RunSummary(
        ticks=n,
        duration_s=trace[-1].t - trace[0].t,
        waypoints_reached=len(reached_times),
        waypoint_times=reached_times,
        max_error_by_mode={k: max(v) for k, v in errs.items() if v},
        mean_error_by_mode={k: math.fsum(v) / len(v) for k, v in errs.items() if v},
        mode_occupancy={k: len(v) / n for k, v in errs.items()},
        zone_entries=entries,
        final_true_pos=tuple(trace[-1].true_pos),
        final_est_pos=tuple(trace[-1].est_pos),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace_csv(trace: Sequence[TraceRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_HEADER + TRACE_EXTRA)
    for r in trace:
        w.writerow([_fmt(r.t), *map(_fmt, r.true_pos), *map(_fmt, r.est_pos), r.mode.value,
                    _fmt(r.battery), *map(_fmt, r.command), int(r.reached),
                    _fmt(r.yaw_deg), _fmt(r.angle_est_deg), int(r.in_zone), int(r.uwb_ok), int(r.rfid_ok)])


def trace_to_csv(trace: Sequence[TraceRecord]) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    return buf.getvalue()


class TraceFormatError(HybridNavError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def _flag(s: str) -> bool:
    if s not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {s!r}")
    return s == "1"


def read_trace_csv(fh) -> list[TraceRecord]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise TraceFormatError(1, "empty trace file")
    header = [h.strip() for h in header]
    missing = [c for c in TRACE_HEADER if c not in header]
    if missing:
        raise TraceFormatError(1, f"missing columns {missing}")
    col = {c: i for i, c in enumerate(header)}
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TraceFormatError(lineno, f"expected {len(header)} fields, got {len(row)}")
        try:
            g = lambda c: float(row[col[c]])  # noqa: E731
            opt = lambda c, dflt: row[col[c]] if c in col else dflt  # noqa: E731
            rec = TraceRecord(
                t=g("t_s"),
                true_pos=(g("true_e"), g("true_n"), g("true_u")),
                est_pos=(g("est_e"), g("est_n"), g("est_u")),
                mode=NavMode(row[col["mode"]]),
                battery=g("battery"),
                command=(g("cmd_e"), g("cmd_n"), g("cmd_u")),
                reached=_flag(row[col["reached"]]),
                yaw_deg=float(opt("yaw_deg", "0.0")),
                angle_est_deg=float(opt("angle_est_deg", "nan")),
                in_zone=_flag(opt("in_zone", "0")),
                uwb_ok=_flag(opt("uwb_ok", "0")),
                rfid_ok=_flag(opt("rfid_ok", "0")),
            )
        except (ValueError, KeyError) as exc:
            raise TraceFormatError(lineno, str(exc)) from None
        if out and not rec.t > out[-1].t:
            raise TraceFormatError(lineno, "time is not strictly increasing")
        out.append(rec)
    if not out:
        raise TraceFormatError(2, "trace has no records")
    return out


# ------------------------------------------------------------------- engine

class _Car:
    """Simulation-side state of one parked car: true position plus its
    GPS history for the current stay."""

    def __init__(self, spec, index, s: Scenario):
        self.spec = spec
        self.index = index
        self.true_pos = _anchor_pos(spec)
        self.geo = enu_to_geodetic(self.true_pos, s.origin)
        self.stay = None
        self.samples = []
        self.used = 0
        self.estimate: Optional[Anchor] = None
        self.visit = 0

    def refresh(self, s: Scenario, anchor: Anchor, t: float, interval: float) -> Anchor:
        park = anchor.stationary_since
        if self.stay != park:
            self.stay = park
            self.visit += 1
            horizon = s.duration_s - park + interval
            self.samples = gps_mod.simulate_gps_track(
                self.geo, horizon, interval, s.gps_model,
                seed=rng_stream(s.seed, "gps", self.index, self.visit))
            self.used = 0
            self.estimate = None
        n = int(math.floor((t - park) / interval + 1e-9)) + 1
        n = min(n, len(self.samples))
        if n != self.used or self.estimate is None:
            self.used = n
            self.estimate = refine_anchor_position(anchor, self.samples[:n], s.origin,
                                                   sigma_per_hdop_m=s.gps_model.base_sigma_m)
        return Anchor(anchor.id, self.estimate.pos_estimate, AnchorKind.PARKED_CAR,
                      self.estimate.pos_variance_m2, anchor.stationary_since,
                      eligibility_threshold_s=anchor.eligibility_threshold_s, last_update_t=t)


def _battery_script(script, t):
    ts = [p[0] for p in script]
    vs = [p[1] for p in script]
    return float(np.interp(t, ts, vs))


def _line_frame(zone: CriticalZone):
    a = zone.antennas[0].as_array()
    b = zone.antennas[1].as_array()
    u = b[:2] - a[:2]
    L = float(np.linalg.norm(u))
    u = u / L
    left = np.array([-u[1], u[0]])
    return a, u, left, L


def _project_diag(var_along, var_lat, u):
    # per-axis variance of an (along, lateral) covariance rotated into east/north
    ce, cn = u
    ve = ce * ce * var_along + cn * cn * var_lat
    vn = cn * cn * var_along + ce * ce * var_lat
    return ve, vn


def run_scenario(s: Scenario) -> tuple[list[TraceRecord], RunSummary]:
    raw = s.raw
    dt = s.dt_s
    n_ticks = s.n_ticks
    uwb_cfg, rfid_cfg, bat_cfg, est_cfg = raw["uwb"], raw["rfid"], raw["battery"], raw["estimator"]
    gps_interval = float(raw["gps"]["interval_s"])
    ag = raw["agent"]
    max_speed = float(ag.get("max_speed_mps", 1.0))
    max_yaw_rate = float(ag.get("max_yaw_rate_dps", 30.0))
    true = np.array([ag["east_m"], ag["north_m"], ag.get("up_m", 0.0)], dtype=float)
    yaw = float(ag.get("yaw_deg", 0.0))
    battery = float(ag.get("battery_frac", 1.0))
    critical = float(bat_cfg["critical"])
    script = bat_cfg.get("script")
    uwb_powered = battery >= critical

    rng_uwb = rng_stream(s.seed, "uwb")
    rng_rfid = rng_stream(s.seed, "rfid")

    cars = {spec["id"]: _Car(spec, i, s) for i, spec in enumerate(s.anchors)
            if spec.get("kind", "FIXED") != "FIXED"}
    fixed = [Anchor(spec["id"], _anchor_pos(spec), AnchorKind.FIXED) for spec in s.anchors
             if spec.get("kind", "FIXED") == "FIXED"]
    true_anchor_xyz = {spec["id"]: _anchor_pos(spec).as_array() for spec in s.anchors}

    uwb_sigma = float(uwb_cfg["sigma_m"])
    uwb_every = max(1, int(round(1.0 / (float(uwb_cfg["rate_hz"]) * dt))))
    radio_range = float(uwb_cfg["radio_range_m"])
    max_gdop = float(uwb_cfg["max_gdop"])
    min_anchors = int(uwb_cfg["min_anchors"])

    tags = tag_pair(float(rfid_cfg["tag_baseline_m"]))
    rfid_rate = float(rfid_cfg["rate_hz"])
    rfid_window = float(rfid_cfg["window_s"])
    rfid_min = int(rfid_cfg["min_count"])
    rfid_noise = float(rfid_cfg["noise_db"])
    read_range = float(rfid_cfg["read_range_m"])
    lateral_var = float(rfid_cfg["lateral_sigma_m"]) ** 2
    # buffers[(zone, antenna, tag)] -> deque of (t, rssi)
    buffers = {(zi, ai, ti): deque() for zi, z in enumerate(s.zones)
               for ai in range(len(z.antennas)) for ti in range(len(tags))}
    # the reader is assumed to have been running for one window before t=0
    next_read_k = 1 - int(round(rfid_window * rfid_rate))

    q = float(est_cfg["process_noise_m2_per_s"])
    sig0 = float(est_cfg["initial_sigma_m"])
    est = PositionEstimate(LocalPosition.from_array(true), (sig0 ** 2,) * 3, NavMode.UNAVAILABLE, 0.0)

    mission = s.mission
    mtype = mission["type"]
    wps = [LocalPosition.from_array(list(w) + ([true[2]] if len(w) == 2 else [])) for w in mission.get("waypoints", [])]
    wp_index = 0
    radius = float(mission.get("radius_m", 0.25))
    capture = float(mission.get("capture_radius_m", 0.5 * radius))
    gain = float(mission.get("gain_per_s", 1.0))
    mzone = s.zones[mission.get("zone", 0)] if mtype in ("line", "orientation") else None
    if mtype == "line":
        tol = float(mission.get("tolerance_m", 0.10))
        deadband = float(mission.get("deadband_m", 0.5 * tol))
    elif mtype == "orientation":
        tol = float(mission.get("tolerance_deg", 3.0))
        deadband = float(mission.get("deadband_deg", 0.5 * tol))

    uwb_ranges_last_tick = 0
    travelled = [np.zeros(3)]  # commanded displacement at the start of each tick
    trace: list[TraceRecord] = []

    for k in range(n_ticks):
        t = k * dt
        tpos = LocalPosition.from_array(true)

        # anchors
        anchors = fixed + [cars[a.id].refresh(s, a, t, gps_interval) for a in _parked_cars(s, t)]

        # battery
        if script:
            battery = min(battery, _battery_script(script, t))
        elif k > 0:
            battery -= float(bat_cfg["drain_per_s"]) * dt + float(bat_cfg["drain_per_uwb_range"]) * uwb_ranges_last_tick
        battery = min(max(battery, 0.0), 1.0)
        if battery < critical:
            uwb_powered = False
        uwb_ranges_last_tick = 0

        # uwb coverage
        in_range = [a for a in anchors if a.eligible
                    and math.dist(true, true_anchor_xyz[a.id]) <= radio_range]
        g = gdop(in_range, tpos) if len(in_range) >= 2 else math.inf
        coverage = CoverageReport(len(in_range), g)
        uwb_ok = uwb_powered and coverage.usable(min_anchors, max_gdop)

        # rfid readings arriving during (t - dt, t]
        while next_read_k / rfid_rate <= t + 1e-12:
            tr = next_read_k / rfid_rate
            for zi, z in enumerate(s.zones):
                for ai, ant in enumerate(z.antennas):
                    if math.dist(true, ant.as_array()) > read_range:
                        continue
                    means = expected_rssi(tpos, yaw, ant, tags, s.rfid_model, s.angle_model)
                    for ti, (mu, _) in enumerate(means):
                        buffers[(zi, ai, ti)].append((tr, mu + rfid_noise * rng_rfid.standard_normal()))
            next_read_k += 1
        for buf in buffers.values():
            while buf and buf[0][0] <= t - rfid_window:
                buf.popleft()

        zone_idx = next((zi for zi, z in enumerate(s.zones) if z.contains(tpos)), None)
        in_zone = zone_idx is not None
        rfid_est = None
        angle_est = math.nan
        if in_zone:
            rfid_est, angle_est = _rfid_estimate(s, zone_idx, buffers, len(tags), rfid_min, rfid_noise,
                                                 lateral_var, true[2], t)
            if rfid_est is not None:
                # window means describe the agent around the mean read time; carry them
                # forward by the commanded motion since then
                first = buffers[(zone_idx, 0, 0)]
                t_bar = math.fsum(x for x, _ in first) / len(first)
                j = min(max(int(round(t_bar / dt)), 0), k)
                shift = travelled[k] - travelled[j]
                p = rfid_est.pos
                rfid_est = PositionEstimate(LocalPosition(p.east_m + shift[0], p.north_m + shift[1], p.up_m),
                                            rfid_est.variance_m2, rfid_est.source, t)
        rfid_ok = rfid_est is not None
        # the zone's reader is available whenever one of its antennas can reach the agent;
        # an estimate is only produced once the window holds enough reads
        rfid_avail = in_zone and any(math.dist(true, a.as_array()) <= read_range
                                     for a in s.zones[zone_idx].antennas)

        agent = AgentState(tpos, yaw, battery, uwb_powered, max_speed)
        mode = select_mode(agent, coverage, in_zone, rfid_avail, critical, min_anchors, max_gdop)

        # estimation
        prior = est
        sources = [PositionEstimate(prior.pos, tuple(v + q * dt for v in prior.variance_m2) if k > 0
                                    else prior.variance_m2, mode, t)]
        if mode in (NavMode.UWB_GPS, NavMode.HYBRID) and k % uwb_every == 0:
            pairs = []
            for a in in_range:
                d = math.dist(true, true_anchor_xyz[a.id])
                r = max(d + uwb_sigma * rng_uwb.standard_normal(), 0.0) if uwb_sigma > 0 else d
                pairs.append((a, UwbRange(a.id, r, uwb_sigma if uwb_sigma > 0 else 1e-3, t)))
            uwb_ranges_last_tick = len(pairs)
            try:
                fix = multilaterate(pairs, guess=LocalPosition(prior.pos.east_m, prior.pos.north_m, true[2]))
                cov = fix.covariance
                sources.append(PositionEstimate(fix.pos, (cov[0, 0], cov[1, 1], 1e-4), mode, t))
            except HybridNavError:
                pass
        if mode in (NavMode.HYBRID, NavMode.RFID_ONLY) and rfid_est is not None:
            sources.append(PositionEstimate(rfid_est.pos, rfid_est.variance_m2, mode, t))
        est = fuse(sources, source=mode)

        # control
        reached = False
        cmd = ControlCommand()
        if mode is not NavMode.UNAVAILABLE:
            if mtype == "waypoints":
                if wp_index < len(wps):
                    c = waypoint_step(est, (wps[wp_index], capture), gain, max_speed)
                    if c.waypoint_reached:
                        reached = True
                        wp_index += 1
                    cmd = c
            elif mtype == "line":
                a0, u, left, L = _line_frame(mzone)
                s_est = float(np.dot(est.pos.as_array()[:2] - a0[:2], u))
                c = line_hold_step(s_est, float(mission["target_m"]), deadband, gain, max_speed)
                v = c.velocity_mps[0] * u + c.velocity_mps[1] * left
                cmd = ControlCommand((float(v[0]), float(v[1]), 0.0), 0.0, c.waypoint_reached)
                reached = c.waypoint_reached
            elif mtype == "orientation":
                # hold still until the window yields an angle
                if not math.isnan(angle_est):
                    cmd = orientation_step(angle_est, float(mission["target_deg"]), deadband, gain, max_yaw_rate)
                    reached = cmd.waypoint_reached

        trace.append(TraceRecord(
            t=t, true_pos=tuple(float(x) for x in true), est_pos=(est.pos.east_m, est.pos.north_m, est.pos.up_m),
            mode=mode, battery=battery, command=tuple(float(x) for x in cmd.velocity_mps), reached=reached,
            yaw_deg=yaw, angle_est_deg=angle_est, in_zone=in_zone, uwb_ok=uwb_ok, rfid_ok=rfid_ok))

        # kinematics
        v = np.array(cmd.velocity_mps, dtype=float)
        sp = float(np.linalg.norm(v))
        if sp > max_speed:
            v *= max_speed / sp
        true = true + v * dt
        travelled.append(travelled[-1] + v * dt)
        rate = max(-max_yaw_rate, min(max_yaw_rate, cmd.yaw_rate_dps))
        yaw = yaw + rate * dt
        est = PositionEstimate(LocalPosition.from_array(est.pos.as_array() + v * dt), est.variance_m2,
                               est.source, t + dt)

    return trace, summarize(trace)


def _rfid_estimate(s: Scenario, zi: int, buffers, n_tags, min_count, noise_db, lateral_var, up, t):
    """Position (and, for single-antenna zones, angle) from the zone's windows."""
    zone = s.zones[zi]
    model = s.rfid_model
    per_antenna = []
    for ai in range(len(zone.antennas)):
        chans = [buffers[(zi, ai, ti)] for ti in range(n_tags)]
        if any(len(c) < min_count for c in chans):
            return None, math.nan
        means = [math.fsum(x for _, x in c) / len(c) for c in chans]
        counts = [len(c) for c in chans]
        per_antenna.append((means, counts))

    def dist_of(means, counts):
        ds = [rssi_to_distance(m, model, clamp=True) for m in means]
        d = sum(ds) / len(ds)
        sd = model.distance_per_db(d) * noise_db / math.sqrt(sum(counts))
        return d, sd

    angle = math.nan
    if len(zone.antennas) >= 2:
        a0, u, left, L = _line_frame(zone)
        (da, sa), (db, sb) = (dist_of(*per_antenna[0]), dist_of(*per_antenna[1]))
        # slant ranges to horizontal
        dz_a = up - zone.antennas[0].up_m
        dz_b = up - zone.antennas[1].up_m
        da = math.sqrt(max(da * da - dz_a * dz_a, 0.0))
        db = math.sqrt(max(db * db - dz_b * dz_b, 0.0))
        pos_s, unc = combine_antenna_distances(da, db, L, clamp=True)
        var_along = 0.25 * (sa * sa + sb * sb) + unc * unc
        xy = a0[:2] + pos_s * u
        ve, vn = _project_diag(var_along, lateral_var, u)
    else:
        ant = zone.antennas[0]
        d, sd = dist_of(*per_antenna[0])
        dz = up - ant.up_m
        dh = math.sqrt(max(d * d - dz * dz, 0.0))
        cx, cy = np.array(zone.polygon).mean(axis=0)
        axis = np.array([cx - ant.east_m, cy - ant.north_m])
        axis /= np.linalg.norm(axis)
        xy = np.array([ant.east_m, ant.north_m]) + dh * axis
        ve, vn = _project_diag(sd * sd, lateral_var, axis)
        if s.angle_model is not None and n_tags >= 2:
            means = per_antenna[0][0]
            try:
                angle = delta_rssi_to_angle(means[0] - means[1], s.angle_model)
            except OutOfRangeError:
                angle = math.nan
    est = PositionEstimate(LocalPosition(float(xy[0]), float(xy[1]), up), (ve, vn, 1e-4), NavMode.RFID_ONLY, t)
    return est, angle
