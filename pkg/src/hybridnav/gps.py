"""GPS samples, HDOP-weighted averaging and an urban GPS noise generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError
from .geo import FrameOrigin, GeoPosition

CSV_HEADER = ("t_s", "lat_deg", "lon_deg", "hdop")


@dataclass(frozen=True)
class GpsSample:
    t: float
    pos: GeoPosition
    hdop: float

    def __post_init__(self):
        if not (math.isfinite(self.hdop) and self.hdop > 0):
            raise DomainError(f"hdop must be > 0, got {self.hdop!r}")
        if not (math.isfinite(self.t) and self.t >= 0):
            raise DomainError(f"sample time must be >= 0, got {self.t!r}")


@dataclass(frozen=True)
class GpsNoiseModel:
    """Zero-mean Gaussian horizontal error with per-axis sigma ``base_sigma_m * hdop``.

    HDOP follows a log-space Ornstein-Uhlenbeck process centred on
    ``hdop_median`` with stationary log spread ``hdop_log_sigma``, clipped
    to ``hdop_range``.  Mass piles up near the clip edges, which is how a
    receiver next to tall buildings behaves: mostly good fixes with long
    stretches of poor geometry.
    """

    base_sigma_m: float = 0.8
    hdop_range: tuple[float, float] = (0.5, 12.0)
    correlation_time_s: float = 120.0
    hdop_median: float = 1.0
    hdop_log_sigma: float = 1.5

    def __post_init__(self):
        lo, hi = self.hdop_range
        if not self.base_sigma_m >= 0:
            raise DomainError("base_sigma_m must be non-negative")
        if lo < 0.5 or hi < lo:
            raise DomainError(f"invalid hdop_range {self.hdop_range!r}")
        if self.correlation_time_s <= 0:
            raise DomainError("correlation_time_s must be positive")
        if self.hdop_median <= 0 or self.hdop_log_sigma < 0:
            raise DomainError("hdop_median must be > 0 and hdop_log_sigma >= 0")


URBAN = GpsNoiseModel()


def hdop_weights(samples: Sequence[GpsSample]) -> np.ndarray:
    """Normalised inverse-square-HDOP weights, aligned with ``samples``."""
    if len(samples) == 0:
        raise DomainError("cannot weight an empty sample list")
    h = np.array([s.hdop for s in samples], dtype=float)
    if np.any(~(h > 0)):
        raise DomainError("every hdop must be > 0")
    inv = h ** -2.0
    return inv / inv.sum()


def weighted_position(samples: Sequence[GpsSample]) -> GeoPosition:
    w = hdop_weights(samples)
    if len(samples) == 1:
        return samples[0].pos
    lat = np.array([s.pos.lat_deg for s in samples])
    lon = np.array([s.pos.lon_deg for s in samples])
    # clip guards the bounding-box property against last-ulp rounding
    lat_w = float(np.clip(w @ lat, lat.min(), lat.max()))
    lon_w = float(np.clip(w @ lon, lon.min(), lon.max()))
    return GeoPosition(lat_w, lon_w)


def simulate_hdop(n: int, interval_s: float, model: GpsNoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Correlated HDOP series of length ``n`` sampled every ``interval_s``."""
    lo, hi = model.hdop_range
    mu = math.log(model.hdop_median)
    s = model.hdop_log_sigma
    phi = math.exp(-interval_s / model.correlation_time_s)
    innov = s * math.sqrt(1.0 - phi * phi)
    eps = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = mu + s * eps[0]
    for k in range(1, n):
        x[k] = mu + phi * (x[k - 1] - mu) + innov * eps[k]
    return np.clip(np.exp(x), lo, hi)


def simulate_gps_track(true_pos: GeoPosition, duration_s: float, interval_s: float,
                       model: GpsNoiseModel = URBAN, seed=None, t0: float = 0.0) -> list[GpsSample]:
    """Simulate ``ceil(duration/interval)`` fixes of a static receiver.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if not duration_s > 0:
        raise DomainError("duration must be positive")
    if not interval_s > 0:
        raise DomainError("interval must be positive")
    rng = np.random.default_rng(seed)
    n = math.ceil(duration_s / interval_s - 1e-9)
    hdop = simulate_hdop(n, interval_s, model, rng)
    noise = rng.standard_normal((n, 2)) * (model.base_sigma_m * hdop)[:, None]
    m_lat, m_lon = FrameOrigin(true_pos).meters_per_degree()
    out = []
    for k in range(n):
        if model.base_sigma_m == 0.0:
            pos = true_pos
        else:
            pos = GeoPosition(true_pos.lat_deg + noise[k, 1] / m_lat,
                              true_pos.lon_deg + noise[k, 0] / m_lon)
        out.append(GpsSample(t=t0 + k * interval_s, pos=pos, hdop=float(hdop[k])))
    return out


def write_csv(samples: Iterable[GpsSample], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in samples:
        w.writerow([repr(float(s.t)), repr(s.pos.lat_deg), repr(s.pos.lon_deg), repr(float(s.hdop))])


def read_csv(fh) -> list[GpsSample]:
    """Parse the ``t_s,lat_deg,lon_deg,hdop`` sample format."""
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise DomainError(f"expected header {','.join(CSV_HEADER)}, got {header!r}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise DomainError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            t, lat, lon, h = (float(c) for c in row)
            out.append(GpsSample(t, GeoPosition(lat, lon), h))
        except (ValueError, DomainError) as exc:
            raise DomainError(f"line {lineno}: {exc}") from None
    return out
