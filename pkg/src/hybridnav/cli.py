"""Command-line front end.

Exit codes: 0 success, 1 I/O problem, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import gps, rfid, sim
from .errors import DomainError, HybridNavError, ScenarioValidationError
from .nav import NavMode

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2

SEED_ENV = "HYBRIDNAV_SEED"


def _err(msg: str) -> None:
    print(f"hybridnav: {msg}", file=sys.stderr)


def _default_seed():
    v = os.environ.get(SEED_ENV)
    if v is None or v.strip() == "":
        return None
    return int(v)


def cmd_run(scenario_path, seed=None, out_dir=".") -> int:
    try:
        with open(scenario_path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        _err(f"cannot read scenario {scenario_path}: {exc.strerror or exc}")
        return EXIT_IO
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        _err(f"{scenario_path}: invalid JSON: {exc}")
        return EXIT_INVALID
    if isinstance(doc, dict) and seed is not None:
        doc["seed"] = seed
    try:
        scenario = sim.scenario_from_dict(doc)
    except ScenarioValidationError as exc:
        _err(f"{scenario_path}: {len(exc.violations)} validation error(s)")
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INVALID
    trace, summary = sim.run_scenario(scenario)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
            sim.write_trace_csv(trace, fh)
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary.to_dict(), fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        _err(f"cannot write outputs to {out}: {exc.strerror or exc}")
        return EXIT_IO
    print(f"{len(trace)} ticks, {summary.waypoints_reached} waypoint(s) reached -> {out}")
    return EXIT_OK


def cmd_calibrate_rfid(calib_csv, kind, out_model_json) -> int:
    try:
        with open(calib_csv, encoding="utf-8", newline="") as fh:
            table, points = rfid.read_calibration_csv(fh)
    except OSError as exc:
        _err(f"cannot read {calib_csv}: {exc.strerror or exc}")
        return EXIT_IO
    except DomainError as exc:
        _err(f"{calib_csv}: {exc}")
        return EXIT_INVALID
    try:
        if table == "angle":
            model = rfid.fit_angle_model(points)
            predict = model.delta
        else:
            mk = {"log": rfid.ModelKind.LOG_DISTANCE, "linear": rfid.ModelKind.LINEAR}[kind]
            model = rfid.fit_path_loss(points, mk)
            predict = model.rssi
    except HybridNavError as exc:
        _err(f"{calib_csv}: {exc}")
        return EXIT_INVALID
    try:
        Path(out_model_json).parent.mkdir(parents=True, exist_ok=True)
        with open(out_model_json, "w", encoding="utf-8") as fh:
            fh.write(rfid.model_to_json(model))
            fh.write("\n")
    except OSError as exc:
        _err(f"cannot write {out_model_json}: {exc.strerror or exc}")
        return EXIT_IO
    x_name = "angle_deg" if table == "angle" else "distance_m"
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow([x_name, "observed_dbm", "predicted_dbm", "residual_db"])
    for x, y in points:
        p = float(predict(x))
        w.writerow([repr(x), repr(y), repr(p), repr(y - p)])
    return EXIT_OK


def cmd_gps_average(samples_csv) -> int:
    try:
        with open(samples_csv, encoding="utf-8", newline="") as fh:
            samples = gps.read_csv(fh)
    except OSError as exc:
        _err(f"cannot read {samples_csv}: {exc.strerror or exc}")
        return EXIT_IO
    except DomainError as exc:
        _err(f"{samples_csv}: {exc}")
        return EXIT_INVALID
    if not samples:
        _err(f"{samples_csv}: no samples")
        return EXIT_INVALID
    p = gps.weighted_position(samples)
    print(f"lat_deg={p.lat_deg!r}")
    print(f"lon_deg={p.lon_deg!r}")
    print(f"samples={len(samples)}")
    return EXIT_OK


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_report(trace_csv, out_dir) -> int:
    try:
        with open(trace_csv, encoding="utf-8", newline="") as fh:
            trace = sim.read_trace_csv(fh)
    except OSError as exc:
        _err(f"cannot read {trace_csv}: {exc.strerror or exc}")
        return EXIT_IO
    except sim.TraceFormatError as exc:
        _err(f"{trace_csv}: {exc}")
        return EXIT_INVALID
    summary = sim.summarize(trace)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "error_series.csv", ("t_s", "mode", "error_m"),
                   ([repr(r.t), r.mode.value, repr(sim.position_error(r))] for r in trace))
        # one row per contiguous stretch in a mode
        spans = []
        for r in trace:
            if spans and spans[-1][2] == r.mode.value:
                spans[-1][1] = r.t
            else:
                spans.append([r.t, r.t, r.mode.value])
        _write_csv(out / "mode_timeline.csv", ("start_s", "end_s", "mode"),
                   ([repr(a), repr(b), m] for a, b, m in spans))
        _write_csv(out / "waypoints.csv", ("index", "t_s"),
                   ([i, repr(t)] for i, t in enumerate(summary.waypoint_times)))
        _write_csv(out / "mode_stats.csv", ("mode", "occupancy", "mean_error_m", "max_error_m"),
                   ([m.value, repr(summary.mode_occupancy[m.value]),
                     repr(summary.mean_error_by_mode.get(m.value, float("nan"))),
                     repr(summary.max_error_by_mode.get(m.value, float("nan")))] for m in NavMode))
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary.to_dict(), fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        _err(f"cannot write report to {out}: {exc.strerror or exc}")
        return EXIT_IO
    print(f"report for {len(trace)} ticks -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridnav", description="Hybrid GPS/UWB/RFID localisation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write trace.csv + summary.json")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None, help=f"overrides the scenario seed (default: ${SEED_ENV})")
    r.add_argument("--out", default=".")

    c = sub.add_parser("calibrate-rfid", help="fit an RFID model from a calibration CSV")
    c.add_argument("--input", required=True)
    c.add_argument("--kind", choices=("log", "linear"), default="log",
                   help="distance model kind; angle CSVs are detected from their header")
    c.add_argument("--out", required=True)

    g = sub.add_parser("gps-average", help="HDOP-weighted average of a GPS sample CSV")
    g.add_argument("--input", required=True)

    rep = sub.add_parser("report", help="tabulate a trace into plot-ready CSV files")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        seed = args.seed
        if seed is None:
            try:
                seed = _default_seed()
            except ValueError:
                _err(f"{SEED_ENV} must be an integer")
                return EXIT_INVALID
        return cmd_run(args.scenario, seed, args.out)
    if args.command == "calibrate-rfid":
        return cmd_calibrate_rfid(args.input, args.kind, args.out)
    if args.command == "gps-average":
        return cmd_gps_average(args.input)
    return cmd_report(args.trace, args.out)


if __name__ == "__main__":
    sys.exit(main())
