"""Four hours of urban GPS fixes for a parked car, averaged two ways.

The plain mean lets the bad-geometry stretches drag the estimate around.
Weighting each fix by 1/HDOP^2 mostly ignores them.
"""

import argparse
import math

import numpy as np

from hybridnav import FrameOrigin, GeoPosition, geodetic_to_enu, simulate_gps_track, weighted_position


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--hours", type=float, default=4.0)
    args = ap.parse_args()

    truth = GeoPosition(53.3084, -6.2238)
    origin = FrameOrigin(truth)

    def err(p):
        e = geodetic_to_enu(p, origin)
        return math.hypot(e.east_m, e.north_m)

    print(f"{'seed':>4} {'fixes':>6} {'worst fix':>10} {'plain':>7} {'weighted':>9}")
    for seed in range(args.seeds):
        track = simulate_gps_track(truth, args.hours * 3600, 10, seed=seed)
        plain = GeoPosition(float(np.mean([s.pos.lat_deg for s in track])),
                            float(np.mean([s.pos.lon_deg for s in track])))
        worst = max(err(s.pos) for s in track)
        print(f"{seed:4d} {len(track):6d} {worst:9.1f}m {err(plain):6.2f}m {err(weighted_position(track)):8.2f}m")


if __name__ == "__main__":
    main()
