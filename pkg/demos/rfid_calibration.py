"""Calibrate a path-loss model from a few stationary sessions, then invert it.

Each session is 20 s of backscatter reads at a known distance; the model
is fit to the session means.  A fresh 10 s window at each distance is
then converted back to metres.
"""

import argparse

import numpy as np

from hybridnav.geo import LocalPosition
from hybridnav.rfid import ModelKind, PathLossModel, aggregate, fit_path_loss, rssi_to_distance
from hybridnav.rfid import Tag, simulate_backscatter


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--noise-db", type=float, default=0.44)
    ap.add_argument("--kind", choices=("log", "linear"), default="log")
    ap.add_argument("--seed", type=int, default=4)
    args = ap.parse_args()

    truth = PathLossModel.log_distance(-55.0, 2.0, (0.1, 8.0))
    kind = ModelKind.LOG_DISTANCE if args.kind == "log" else ModelKind.LINEAR
    agent = LocalPosition(0.0, 0.0, 0.5)
    points = (0.5, 1.0, 1.5, 2.0, 2.5)
    seeds = np.random.SeedSequence(args.seed).spawn(2 * len(points))

    calib = []
    for d, ss in zip(points, seeds):
        rs = simulate_backscatter(agent, 0.0, LocalPosition(d, 0.0, 0.5), [Tag("t")], truth,
                                  duration_s=20.0, noise=args.noise_db, seed=ss)
        calib.append((d, aggregate(rs, window_s=20.0, min_count=100).mean_dbm))
    model = fit_path_loss(calib, kind)
    print("fitted:", model.to_dict())

    print(f"{'true':>5} {'mean dBm':>9} {'IQR':>5} {'estimate':>9}")
    for d, ss in zip(points, seeds[len(points):]):
        rs = simulate_backscatter(agent, 0.0, LocalPosition(d, 0.0, 0.5), [Tag("t")], truth,
                                  duration_s=10.0, noise=args.noise_db, seed=ss)
        a = aggregate(rs)
        est = rssi_to_distance(a.mean_dbm, model, clamp=True)
        print(f"{d:5.2f} {a.mean_dbm:9.2f} {a.iqr_db:5.2f} {est:8.3f}m")


if __name__ == "__main__":
    main()
