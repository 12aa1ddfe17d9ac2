"""Walk the bundled crossing scenario and print every mode change.

The agent enters the crossing on UWB, picks up the curb antennas, loses
UWB when the battery script drops below the critical level, and finishes
the crossing on RFID alone.
"""

import argparse

from hybridnav import sim


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="crossing", choices=sim.BUNDLED)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    scen = sim.bundled_scenario(args.scenario)
    if args.seed is not None:
        scen = scen.with_seed(args.seed)
    trace, summary = sim.run_scenario(scen)

    prev = None
    for r in trace:
        if r.mode != prev:
            print(f"t={r.t:6.2f}s  {r.mode.value:<11} battery={r.battery:.3f} in_zone={r.in_zone} "
                  f"error={sim.position_error(r):.3f} m")
            prev = r.mode
    print()
    for mode, occ in summary.mode_occupancy.items():
        if occ:
            print(f"{mode:<11} {occ:6.1%}  max error {summary.max_error_by_mode[mode]:.3f} m")
    print(f"waypoints reached at {summary.waypoint_times}")


if __name__ == "__main__":
    main()
