"""Geodetic and local East-North-Up positions.

All estimation runs in a local tangent plane anchored at a declared
origin.  The projection is the small-area one: latitude offsets scale by
the WGS84 meridian radius of curvature at the origin, longitude offsets by
the prime-vertical radius times cos(origin latitude).  Over a city district
(< 10 km) its curvature error is far below GPS noise, and because it is
linear it inverts exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# WGS84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


@dataclass(frozen=True)
class GeoPosition:
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        object.__setattr__(self, "lat_deg", float(self.lat_deg))
        object.__setattr__(self, "lon_deg", float(self.lon_deg))
        if not (math.isfinite(self.lat_deg) and -90.0 <= self.lat_deg <= 90.0):
            raise DomainError(f"latitude {self.lat_deg!r} outside [-90, 90]")
        if not (math.isfinite(self.lon_deg) and -180.0 <= self.lon_deg <= 180.0):
            raise DomainError(f"longitude {self.lon_deg!r} outside [-180, 180]")


@dataclass(frozen=True)
class LocalPosition:
    """Meters east, north and up of a frame origin."""

    east_m: float = 0.0
    north_m: float = 0.0
    up_m: float = 0.0

    def __post_init__(self):
        for name in ("east_m", "north_m", "up_m"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not all(math.isfinite(v) for v in (self.east_m, self.north_m, self.up_m)):
            raise DomainError(f"non-finite local position {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.east_m, self.north_m, self.up_m])

    @classmethod
    def from_array(cls, xyz) -> "LocalPosition":
        x = [float(v) for v in xyz]
        if len(x) == 2:
            x.append(0.0)
        return cls(x[0], x[1], x[2])


@dataclass(frozen=True)
class FrameOrigin:
    origin: GeoPosition

    @property
    def meridian_radius_m(self) -> float:
        s = math.sin(math.radians(self.origin.lat_deg))
        return WGS84_A * (1.0 - WGS84_E2) / (1.0 - WGS84_E2 * s * s) ** 1.5

    @property
    def prime_vertical_radius_m(self) -> float:
        s = math.sin(math.radians(self.origin.lat_deg))
        return WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)

    def meters_per_degree(self) -> tuple[float, float]:
        """(north meters per degree latitude, east meters per degree longitude)."""
        k = math.pi / 180.0
        lat0 = math.radians(self.origin.lat_deg)
        return self.meridian_radius_m * k, self.prime_vertical_radius_m * math.cos(lat0) * k


def _as_origin(origin) -> FrameOrigin:
    if isinstance(origin, FrameOrigin):
        return origin
    if isinstance(origin, GeoPosition):
        return FrameOrigin(origin)
    raise DomainError(f"expected FrameOrigin, got {type(origin).__name__}")


def geodetic_to_enu(p: GeoPosition, origin) -> LocalPosition:
    """Project ``p`` into the ENU frame of ``origin``; up is always 0."""
    if not isinstance(p, GeoPosition):
        raise DomainError(f"expected GeoPosition, got {type(p).__name__}")
    o = _as_origin(origin)
    m_lat, m_lon = o.meters_per_degree()
    if m_lon == 0.0 and p.lon_deg != o.origin.lon_deg:
        raise DomainError("longitude offsets are undefined at the poles")
    return LocalPosition(
        east_m=(p.lon_deg - o.origin.lon_deg) * m_lon,
        north_m=(p.lat_deg - o.origin.lat_deg) * m_lat,
        up_m=0.0,
    )


def enu_to_geodetic(p: LocalPosition, origin) -> GeoPosition:
    o = _as_origin(origin)
    m_lat, m_lon = o.meters_per_degree()
    if m_lon == 0.0:
        raise DomainError("cannot place a local frame at a pole")
    return GeoPosition(
        lat_deg=o.origin.lat_deg + p.north_m / m_lat,
        lon_deg=o.origin.lon_deg + p.east_m / m_lon,
    )


def distance(a: LocalPosition, b: LocalPosition) -> float:
    return math.sqrt((a.east_m - b.east_m) ** 2 + (a.north_m - b.north_m) ** 2 + (a.up_m - b.up_m) ** 2)
