"""Synthetic city fixture: taxi-like trajectories with a dense downtown
and a sparse periphery.

Trip endpoints are drawn from a continuous density mixture (a tight
downtown gaussian plus a uniform background), so point density is strongly
non-uniform while trajectory geometry still varies at every spatial scale.
Walks steer toward their destination with heading noise and dwell in place
on arrival, producing repeated-cell runs; each trip carries its own speed
regime.

Everything is driven by a counter-based Philox generator, so a given
(seed, n_traj) pair always produces the same fixture; ``write_porto_csv``
round-trips the fixture through the standard ingestion schema.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_M, GpsPoint, Trajectory
from .porto import PORTO_BBOX, PORTO_INTERVAL_S

_M_PER_DEG_LAT = 2 * math.pi * EARTH_RADIUS_M / 360.0
_EPOCH_BASE = 1_380_000_000  # arbitrary fixed origin for synthetic timestamps
_CORE_SIGMA = 0.006  # degrees; downtown density scale (~670 m)
_CORE_FRAC = 0.8  # share of trip endpoints anchored downtown
_MIN_TRIP_M = 600.0  # resample destinations closer than this


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([int(seed) & (2**64 - 1), int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _sample_endpoint(rng: np.random.Generator, bbox) -> np.ndarray:
    lat_min, lat_max, lon_min, lon_max = bbox
    if rng.uniform() < _CORE_FRAC:
        center = np.array([(lat_min + lat_max) / 2, (lon_min + lon_max) / 2])
        p = center + rng.normal(0.0, _CORE_SIGMA, 2)
    else:
        p = np.array([rng.uniform(lat_min, lat_max), rng.uniform(lon_min, lon_max)])
    return np.array(
        [min(max(p[0], lat_min), lat_max), min(max(p[1], lon_min), lon_max)]
    )


def synthetic_city(
    n_traj: int,
    seed: int = 0,
    bbox: tuple[float, float, float, float] = PORTO_BBOX,
    n_points: tuple[int, int] = (12, 48),
    interval_s: int = PORTO_INTERVAL_S,
) -> list[Trajectory]:
    """Generate ``n_traj`` deterministic trajectories inside ``bbox``."""
    lat_min, lat_max, lon_min, lon_max = bbox

    out: list[Trajectory] = []
    for i in range(n_traj):
        rng = _rng(seed, i + 1)
        origin = _sample_endpoint(rng, bbox)
        dest = _sample_endpoint(rng, bbox)
        while _separation_m(origin, dest) < _MIN_TRIP_M:
            dest = _sample_endpoint(rng, bbox)
        n = int(rng.integers(n_points[0], n_points[1] + 1))
        base_speed = float(rng.choice([4.0, 8.0, 13.0]) * rng.uniform(0.8, 1.2))
        start_t = _EPOCH_BASE + int(rng.integers(0, 30 * 86400))

        lat, lon = float(origin[0]), float(origin[1])
        heading_noise = 0.0
        points = []
        for step in range(n):
            lat = min(max(lat, lat_min), lat_max)
            lon = min(max(lon, lon_min), lon_max)
            points.append(GpsPoint(lat=lat, lon=lon, t=start_t + interval_s * step))

            dlat_deg = dest[0] - lat
            dlon_deg = dest[1] - lon
            dist_m = math.hypot(
                dlat_deg * _M_PER_DEG_LAT,
                dlon_deg * _M_PER_DEG_LAT * math.cos(math.radians(lat)),
            )
            if dist_m < 120.0:
                # Arrived: dwell with small jitter (creates repeated-cell runs).
                lat += float(rng.normal(0.0, 2e-5))
                lon += float(rng.normal(0.0, 2e-5))
                continue
            bearing = math.atan2(
                dlon_deg * math.cos(math.radians(lat)), dlat_deg
            )
            heading_noise = 0.7 * heading_noise + float(rng.normal(0.0, 0.35))
            bearing += heading_noise
            speed = base_speed * float(rng.uniform(0.6, 1.4))
            step_m = speed * interval_s
            lat += step_m * math.cos(bearing) / _M_PER_DEG_LAT
            lon += step_m * math.sin(bearing) / (
                _M_PER_DEG_LAT * math.cos(math.radians(lat))
            )
        out.append(Trajectory(id=f"synth-{seed}-{i:06d}", points=points))
    return out


def _separation_m(a: np.ndarray, b: np.ndarray) -> float:
    mean_lat = math.radians((a[0] + b[0]) / 2)
    return math.hypot(
        (b[0] - a[0]) * _M_PER_DEG_LAT,
        (b[1] - a[1]) * _M_PER_DEG_LAT * math.cos(mean_lat),
    )


def write_porto_csv(trajectories: list[Trajectory], path: str | Path, seed: int = 0) -> None:
    """Write trajectories as a Porto-schema CSV (lossless for fixtures whose
    points use the standard sampling interval)."""
    import csv

    rng = _rng(seed, 0xC5)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_ALL, lineterminator="\n")
        writer.writerow(["TRIP_ID", "CALL_TYPE", "TIMESTAMP", "MISSING_DATA", "POLYLINE"])
        for traj in trajectories:
            call_type = ["A", "B", "C"][int(rng.integers(0, 3))]
            poly = json.dumps([[p.lon, p.lat] for p in traj.points], separators=(",", ":"))
            writer.writerow([traj.id, call_type, str(traj.points[0].t), "False", poly])
