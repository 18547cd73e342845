"""Geodesic primitives and the raw trajectory data model.

All distances use the great-circle (haversine) formula on a sphere with
mean radius ``EARTH_RADIUS_M`` = 6,371,000 m. Bearings are initial
great-circle bearings measured clockwise from true north.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

# Below this time delta (seconds) a segment is treated as stationary and
# its speed reported as 0 instead of dividing by ~0.
MIN_TIME_DELTA_S = 1e-9


@dataclass(slots=True)
class GpsPoint:
    """A single GPS fix: latitude/longitude in decimal degrees, time in seconds."""

    lat: float
    lon: float
    t: int

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(slots=True)
class Trajectory:
    """Chronologically ordered sequence of GPS points with an opaque id."""

    id: str
    points: list[GpsPoint] = field(default_factory=list)

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError(f"trajectory {self.id!r} has no points")
        ts = [p.t for p in self.points]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"trajectory {self.id!r} has decreasing timestamps")

    def __len__(self) -> int:
        return len(self.points)

    def lat_lon_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Latitude and longitude as float64 arrays (for vectorized geodesy)."""
        lat = np.array([p.lat for p in self.points], dtype=np.float64)
        lon = np.array([p.lon for p in self.points], dtype=np.float64)
        return lat, lon


def haversine_m(a: GpsPoint, b: GpsPoint) -> float:
    """Great-circle distance between two points in meters.

    Total function: 0.0 for coordinate-identical points, symmetric in its
    arguments.
    """
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def haversine_matrix_m(
    lat_a: np.ndarray, lon_a: np.ndarray, lat_b: np.ndarray, lon_b: np.ndarray
) -> np.ndarray:
    """Pairwise haversine distances, shape (len(a), len(b)), in meters.

    Mirrors the scalar operation order (deltas in degrees, then radians)
    so the two paths agree to the last few ulps.
    """
    phi_a = np.radians(lat_a)[:, None]
    phi_b = np.radians(lat_b)[None, :]
    dphi = np.radians(lat_b[None, :] - lat_a[:, None])
    dlam = np.radians(lon_b[None, :] - lon_a[:, None])
    s = np.sin(dphi / 2.0) ** 2 + np.cos(phi_a) * np.cos(phi_b) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def bearing_deg(a: GpsPoint, b: GpsPoint) -> tuple[float, bool]:
    """Initial great-circle bearing from ``a`` to ``b``.

    Returns ``(degrees in [0, 360), degenerate)``. Coordinate-identical
    points have no defined bearing; they yield ``(0.0, True)`` and the
    tokenizer forward-fills the heading.
    """
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0, True
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dlam = math.radians(b.lon - a.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    deg = math.degrees(math.atan2(y, x)) % 360.0
    # fmod can return 360.0 when atan2 underflows to -0.0
    if deg >= 360.0:
        deg = 0.0
    return deg, False


def speed_mps(a: GpsPoint, b: GpsPoint) -> float:
    """Haversine-distance-over-time speed of the segment a -> b.

    Duplicate timestamps (dt < MIN_TIME_DELTA_S) yield 0.0 by the
    stationary-time convention. ``b`` must not precede ``a``.
    """
    dt = b.t - a.t
    if dt < 0:
        raise ValueError(f"segment runs backwards in time: {a.t} -> {b.t}")
    if dt < MIN_TIME_DELTA_S:
        return 0.0
    return haversine_m(a, b) / dt
