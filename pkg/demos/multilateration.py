"""Locate an agent from noisy UWB ranges and see how anchor geometry matters.

A square of four anchors gives a low GDOP in the middle.  Squashing the
same anchors onto a thin strip blows the GDOP up, and the position
scatter grows with it.
"""

import argparse
import math

import numpy as np

from hybridnav.geo import LocalPosition
from hybridnav.uwb import Anchor, gdop, multilaterate, simulate_range


def scatter(anchors, truth, sigma, trials, seed):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(trials):
        pairs = [(a, simulate_range(truth, a, sigma, seed=rng)) for a in anchors]
        sol = multilaterate(pairs)
        errs.append(np.sum((sol.pos.as_array()[:2] - truth.as_array()[:2]) ** 2))
    return math.sqrt(np.mean(errs)), sol


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigma", type=float, default=0.10, help="range noise (m)")
    ap.add_argument("--trials", type=int, default=500)
    args = ap.parse_args()

    truth = LocalPosition(10.0, 4.0)
    layouts = {
        "square 20x20": [(0, 0), (20, 0), (0, 20), (20, 20)],
        "strip 20x2": [(0, 0), (20, 0), (0, 2), (20, 2)],
    }
    for name, xy in layouts.items():
        anchors = [Anchor(f"a{i}", LocalPosition(e, n)) for i, (e, n) in enumerate(xy)]
        rmse, last = scatter(anchors, truth, args.sigma, args.trials, seed=11)
        print(f"{name:>13}: GDOP {gdop(anchors, truth):5.2f}  RMSE {rmse:.3f} m  "
              f"(last fix: {last.iterations} iterations, residual {last.residual_rms_m:.3f} m)")
        print(f"{'':>15}last covariance diag: {np.diag(last.covariance).round(5)}")


if __name__ == "__main__":
    main()
