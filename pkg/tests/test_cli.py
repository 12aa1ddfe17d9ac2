import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from hybridnav import cli, sim
from hybridnav.geo import FrameOrigin, GeoPosition, geodetic_to_enu
from hybridnav.gps import GpsSample, simulate_gps_track, write_csv
from hybridnav.rfid import PathLossModel, model_from_json

CROSSING = str(sim.bundled_scenario_path("crossing"))


def test_run_writes_outputs(tmp_path, capsys):
    assert cli.main(["run", "--scenario", CROSSING, "--out", str(tmp_path)]) == 0
    trace = (tmp_path / "trace.csv").read_text()
    assert trace.startswith("t_s,true_e,true_n,true_u,est_e,est_n,est_u,mode,battery,cmd_e,cmd_n,cmd_u,reached")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["waypoints_reached"] == 2


def test_run_seed_flag_and_env(tmp_path, monkeypatch):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["run", "--scenario", CROSSING, "--seed", "7", "--out", str(a)]) == 0
    assert cli.main(["run", "--scenario", CROSSING, "--seed", "7", "--out", str(b)]) == 0
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    monkeypatch.setenv("HYBRIDNAV_SEED", "7")
    assert cli.main(["run", "--scenario", CROSSING, "--out", str(c)]) == 0
    assert (c / "trace.csv").read_bytes() == (a / "trace.csv").read_bytes()
    monkeypatch.setenv("HYBRIDNAV_SEED", "abc")
    assert cli.main(["run", "--scenario", CROSSING, "--out", str(c)]) == 2


def test_run_validation_and_io_errors(tmp_path, capsys):
    d = json.loads(open(CROSSING).read())
    d["dt_s"] = 0
    d["duration_s"] = "long"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert cli.main(["run", "--scenario", str(bad), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "dt_s" in err and "duration_s" in err
    missing = tmp_path / "nope.json"
    assert cli.main(["run", "--scenario", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err
    (tmp_path / "junk.json").write_text("{not json")
    assert cli.main(["run", "--scenario", str(tmp_path / "junk.json")]) == 2


def write_calib(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_calibrate_log_recovers_parameters(tmp_path, capsys):
    truth = PathLossModel.log_distance(-48.0, 2.2)
    d = np.linspace(0.5, 2.5, 5)
    write_calib(tmp_path / "c.csv", ["distance_m", "mean_rssi_dbm"], [[repr(float(x)), repr(float(truth.rssi(x)))] for x in d])
    out = tmp_path / "m.json"
    assert cli.main(["calibrate-rfid", "--input", str(tmp_path / "c.csv"), "--kind", "log", "--out", str(out)]) == 0
    m = model_from_json(out.read_text())
    assert m.a0_dbm == pytest.approx(-48.0, abs=1e-9) and m.n == pytest.approx(2.2, abs=1e-9)
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "distance_m,observed_dbm,predicted_dbm,residual_db" and len(lines) == 6
    assert all(abs(float(l.split(",")[3])) < 1e-9 for l in lines[1:])


def test_calibrate_linear_two_points_and_angle(tmp_path):
    write_calib(tmp_path / "c.csv", ["distance_m", "mean_rssi_dbm"], [[0.5, -40], [2.5, -52]])
    out = tmp_path / "lin.json"
    assert cli.main(["calibrate-rfid", "--input", str(tmp_path / "c.csv"), "--kind", "linear", "--out", str(out)]) == 0
    m = model_from_json(out.read_text())
    assert float(m.rssi(0.5)) == pytest.approx(-40) and float(m.rssi(2.5)) == pytest.approx(-52)
    write_calib(tmp_path / "a.csv", ["angle_deg", "delta_rssi_dbm"], [[-30, -6], [0, 0], [30, 6]])
    out = tmp_path / "ang.json"
    assert cli.main(["calibrate-rfid", "--input", str(tmp_path / "a.csv"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["slope_dbm_per_deg"] == pytest.approx(0.2)


def test_calibrate_errors(tmp_path):
    write_calib(tmp_path / "one.csv", ["distance_m", "mean_rssi_dbm"], [[1.0, -50]])
    assert cli.main(["calibrate-rfid", "--input", str(tmp_path / "one.csv"), "--kind", "log",
                     "--out", str(tmp_path / "m.json")]) == 2
    assert cli.main(["calibrate-rfid", "--input", str(tmp_path / "none.csv"), "--kind", "log",
                     "--out", str(tmp_path / "m.json")]) == 1


def gps_file(path, samples):
    with open(path, "w", newline="") as fh:
        write_csv(samples, fh)


def parse_avg(text):
    kv = dict(line.split("=") for line in text.strip().splitlines())
    return float(kv["lat_deg"]), float(kv["lon_deg"]), int(kv["samples"])


def test_gps_average_examples(tmp_path, capsys):
    p = GeoPosition(53.3, -6.2)
    gps_file(tmp_path / "one.csv", [GpsSample(0, p, 2.0)])
    assert cli.main(["gps-average", "--input", str(tmp_path / "one.csv")]) == 0
    assert parse_avg(capsys.readouterr().out) == (53.3, -6.2, 1)
    pts = [GeoPosition(53.3 + 1e-4 * i, -6.2 - 1e-4 * i) for i in range(4)]
    gps_file(tmp_path / "u.csv", [GpsSample(10 * i, q, 1.7) for i, q in enumerate(pts)])
    assert cli.main(["gps-average", "--input", str(tmp_path / "u.csv")]) == 0
    lat, lon, n = parse_avg(capsys.readouterr().out)
    assert lat == pytest.approx(np.mean([q.lat_deg for q in pts]), abs=1e-12) and n == 4


def test_gps_average_simulated_urban(tmp_path, capsys):
    truth = GeoPosition(53.3084, -6.2238)
    gps_file(tmp_path / "t.csv", simulate_gps_track(truth, 4 * 3600, 10, seed=2024))
    assert cli.main(["gps-average", "--input", str(tmp_path / "t.csv")]) == 0
    lat, lon, n = parse_avg(capsys.readouterr().out)
    e = geodetic_to_enu(GeoPosition(lat, lon), FrameOrigin(truth))
    assert n == 1440 and np.hypot(e.east_m, e.north_m) < 2.0


def test_gps_average_empty_and_malformed(tmp_path):
    (tmp_path / "e.csv").write_text("t_s,lat_deg,lon_deg,hdop\n")
    assert cli.main(["gps-average", "--input", str(tmp_path / "e.csv")]) == 2
    (tmp_path / "m.csv").write_text("t_s,lat_deg,lon_deg,hdop\n0,95,0,1\n")
    assert cli.main(["gps-average", "--input", str(tmp_path / "m.csv")]) == 2


def test_report_matches_summary(tmp_path):
    assert cli.main(["run", "--scenario", CROSSING, "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["report", "--trace", str(tmp_path / "run" / "trace.csv"), "--out", str(tmp_path / "rep")]) == 0
    run_summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    rep_summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert rep_summary == run_summary
    trace, summary = sim.run_scenario(sim.bundled_scenario("crossing"))
    assert rep_summary == json.loads(json.dumps(summary.to_dict()))
    series = list(csv.DictReader(open(tmp_path / "rep" / "error_series.csv")))
    assert len(series) == len(trace)
    timeline = list(csv.DictReader(open(tmp_path / "rep" / "mode_timeline.csv")))
    assert [r["mode"] for r in timeline][:2] == ["UWB_GPS", "HYBRID"]
    wps = list(csv.DictReader(open(tmp_path / "rep" / "waypoints.csv")))
    assert [float(r["t_s"]) for r in wps] == summary.waypoint_times


def test_report_errors(tmp_path, capsys):
    (tmp_path / "empty.csv").write_text("")
    assert cli.main(["report", "--trace", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "r")]) == 2
    trace = sim.trace_to_csv(sim.run_scenario(sim.bundled_scenario("dock"))[0]).splitlines()
    trace[3] = trace[3][:10]
    (tmp_path / "bad.csv").write_text("\n".join(trace))
    assert cli.main(["report", "--trace", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "r")]) == 2
    assert "line 4" in capsys.readouterr().err
    assert cli.main(["report", "--trace", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r")]) == 1


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "hybridnav.cli", "run", "--scenario", CROSSING,
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    bad = subprocess.run([sys.executable, "-m", "hybridnav.cli"], capture_output=True, text=True)
    assert bad.returncode == 2
