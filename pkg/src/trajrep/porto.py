"""Porto-style taxi CSV ingestion, deterministic splitting, and the plain
trajectory store.

Ingestion reads the standard schema (TRIP_ID, CALL_TYPE, TIMESTAMP,
MISSING_DATA, POLYLINE with a JSON list of [lon, lat] pairs), skips
records flagged missing or with empty polylines, drops points outside the
bounding box while keeping the remaining subsequence, and assigns point
timestamps ``start + interval * i`` (the dataset's fixed sampling
interval). Malformed rows are skipped, counted, and reported with line
numbers; they are never fatal.

The split is a pure function of the trip id: FNV-1a 64-bit hash mod 100,
buckets <60 TRAIN, <80 VAL, else TEST.

Trajectory store format (version 1, line oriented)::

    version=1
    count=<records>
    <traj_id>\\t<lat>,<lon>,<t>;...      (repr floats, one record per line)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .geo import GpsPoint, Trajectory

PORTO_BBOX = (41.100, 41.220, -8.700, -8.530)  # lat_min, lat_max, lon_min, lon_max
PORTO_INTERVAL_S = 15

TRAIN, VAL, TEST = "TRAIN", "VAL", "TEST"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MAX_DIAGNOSTICS = 50


@dataclass
class IngestStats:
    """Row accounting for one ingestion pass; parsed + skipped + malformed
    always equals rows."""

    rows: int = 0
    parsed: int = 0
    skipped_missing: int = 0
    skipped_empty: int = 0
    skipped_filtered: int = 0  # all points fell outside the bbox
    malformed: int = 0
    dropped_points: int = 0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return self.skipped_missing + self.skipped_empty + self.skipped_filtered

    def note(self, line_no: int, message: str) -> None:
        if len(self.diagnostics) < _MAX_DIAGNOSTICS:
            self.diagnostics.append(f"line {line_no}: {message}")


def parse_polyline(text: str) -> list[tuple[float, float]]:
    """Decode the POLYLINE field: a JSON list of [lon, lat] pairs."""
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("polyline is not a list")
    pairs = []
    for item in data:
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise ValueError(f"polyline entry {item!r} is not a [lon, lat] pair")
        lon, lat = float(item[0]), float(item[1])
        pairs.append((lon, lat))
    return pairs


def ingest(
    csv_path: str | Path,
    bbox: tuple[float, float, float, float] = PORTO_BBOX,
    interval_s: int = PORTO_INTERVAL_S,
) -> tuple[list[Trajectory], IngestStats]:
    """Read a Porto-schema CSV into in-bbox trajectories plus row accounting."""
    lat_min, lat_max, lon_min, lon_max = bbox
    stats = IngestStats()
    out: list[Trajectory] = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{csv_path}: missing CSV header row")
        cols = {name.upper(): name for name in reader.fieldnames}
        for required in ("TRIP_ID", "TIMESTAMP", "MISSING_DATA", "POLYLINE"):
            if required not in cols:
                raise ValueError(f"{csv_path}: missing column {required}")
        for row in reader:
            stats.rows += 1
            line_no = reader.line_num
            try:
                trip_id = row[cols["TRIP_ID"]]
                if not trip_id:
                    raise ValueError("empty trip id")
                if row[cols["MISSING_DATA"]].strip().lower() == "true":
                    stats.skipped_missing += 1
                    continue
                pairs = parse_polyline(row[cols["POLYLINE"]])
                if not pairs:
                    stats.skipped_empty += 1
                    continue
                start = int(row[cols["TIMESTAMP"]])
                points = []
                for i, (lon, lat) in enumerate(pairs):
                    if lat_min <= lat <= lat_max and lon_min <= lon <= lon_max:
                        points.append(GpsPoint(lat=lat, lon=lon, t=start + interval_s * i))
                    else:
                        stats.dropped_points += 1
                if not points:
                    stats.skipped_filtered += 1
                    continue
                out.append(Trajectory(id=trip_id, points=points))
                stats.parsed += 1
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                stats.malformed += 1
                stats.note(line_no, str(exc))
    return out, stats


def fnv1a_64(text: str) -> int:
    """FNV-1a 64-bit hash; stable across platforms and Python versions."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def split_of(trip_id: str) -> str:
    """Deterministic 60/20/20 bucket for a trip id."""
    if not trip_id:
        raise ValueError("empty trip id")
    bucket = fnv1a_64(trip_id) % 100
    if bucket < 60:
        return TRAIN
    if bucket < 80:
        return VAL
    return TEST


def split_trajectories(
    trajectories: list[Trajectory],
) -> dict[str, list[Trajectory]]:
    out: dict[str, list[Trajectory]] = {TRAIN: [], VAL: [], TEST: []}
    for traj in trajectories:
        out[split_of(traj.id)].append(traj)
    return out


def write_trajectories(trajectories: list[Trajectory], path: str | Path) -> None:
    lines = ["version=1", f"count={len(trajectories)}"]
    for traj in trajectories:
        if any(c in traj.id for c in "\t\n;,"):
            raise ValueError(f"trajectory id {traj.id!r} contains reserved characters")
        pts = ";".join(f"{p.lat!r},{p.lon!r},{p.t}" for p in traj.points)
        lines.append(f"{traj.id}\t{pts}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectories(path: str | Path) -> list[Trajectory]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or lines[0] != "version=1":
        raise ValueError(f"{path}: not a version-1 trajectory store")
    count = int(lines[1].split("=", 1)[1])
    out = []
    for line in lines[2 : 2 + count]:
        traj_id, blob = line.split("\t")
        points = []
        for part in blob.split(";"):
            lat, lon, t = part.split(",")
            points.append(GpsPoint(lat=float(lat), lon=float(lon), t=int(t)))
        out.append(Trajectory(id=traj_id, points=points))
    if len(out) != count:
        raise ValueError(f"{path}: header declares {count} records, found {len(out)}")
    return out
