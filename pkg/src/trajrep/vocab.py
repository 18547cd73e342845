"""Density-adaptive multi-resolution cell vocabulary.

Cells at the base resolution whose training-point counts exceed the
capacity threshold are split into their children, points re-bucketed into
the finer cells, and the process repeats until counts fall below the
threshold or the maximum resolution is reached. Accepted leaves are sorted
canonically (resolution asc, index asc) and assigned dense token ids after
the three reserved specials.

File format (version 1, line oriented text)::

    version=1
    backend=QUAD
    bbox=<lat_min>,<lat_max>,<lon_min>,<lon_max>
    rmin=<int>
    rmax=<int>
    capacity=<int>
    count=<number of entries>
    <token_id>\\t<resolution>\\t<cell_index>      (one per entry)
    checksum=sha256:<hex of everything above>

Round trips are bit exact; bbox floats are written with ``repr``.
"""

from __future__ import annotations

import hashlib
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .geo import GpsPoint
from .grid import CellKey, GridConfig, OutOfDomainError, cell_of

PAD_ID = 0
UNK_ID = 1
MASK_ID = 2
FIRST_CELL_ID = 3

VOCAB_FORMAT_VERSION = 1


class VocabularyFormatError(ValueError):
    """Vocabulary file is structurally malformed or truncated."""


class VocabularyVersionError(VocabularyFormatError):
    """Vocabulary file declares an unsupported format version."""


class VocabularyChecksumError(VocabularyFormatError):
    """Vocabulary file body does not match its integrity checksum."""


@dataclass
class Vocabulary:
    """Immutable token inventory: grid config, capacity, and ordered cell entries."""

    grid: GridConfig
    capacity: int
    entries: list[tuple[CellKey, int]]
    _by_cell: dict[CellKey, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_cell = {cell: tid for cell, tid in self.entries}

    @property
    def num_tokens(self) -> int:
        """Total token-id space: PAD/UNK/MASK plus one id per cell."""
        return FIRST_CELL_ID + len(self.entries)

    def token_id_of(self, cell: CellKey) -> int | None:
        return self._by_cell.get(cell)

    def cell_of_token(self, token_id: int) -> CellKey:
        cell, tid = self.entries[token_id - FIRST_CELL_ID]
        assert tid == token_id
        return cell

    def lookup(self, p: GpsPoint) -> int:
        """Token id of the highest-resolution vocabulary cell containing ``p``.

        Scans resolutions from r_max down to r_min; UNK when no cell hits
        (including points outside a QUAD bbox).
        """
        for r in range(self.grid.r_max, self.grid.r_min - 1, -1):
            try:
                tid = self._by_cell.get(cell_of(p, r, self.grid))
            except OutOfDomainError:
                return UNK_ID
            if tid is not None:
                return tid
        return UNK_ID


def count_base(points: Iterable[GpsPoint], cfg: GridConfig) -> Counter:
    """Exact per-cell point counts at the base resolution.

    Shardable: run on disjoint point streams and combine with
    ``merge_counts``; the merged result equals the serial count.
    """
    counts: Counter = Counter()
    for p in points:
        counts[cell_of(p, cfg.r_min, cfg)] += 1
    return counts


def merge_counts(maps: Iterable[Mapping[CellKey, int]]) -> Counter:
    """Additive merge of sharded count maps."""
    merged: Counter = Counter()
    for m in maps:
        merged.update(m)
    return merged


def build_vocabulary(points: Iterable[GpsPoint], cfg: GridConfig, capacity: int) -> Vocabulary:
    """Recursive density-adaptive refinement over the point stream.

    Cells with more than ``capacity`` points split into children (points
    re-bucketed by their cell at the finer resolution, so hexagonal
    boundary leakage follows the points) until the count fits or r_max is
    reached. Children that receive no points are never enqueued. Output is
    deterministic: entries are canonically sorted before id assignment.
    """
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")

    buckets: dict[CellKey, list[GpsPoint]] = {}
    for p in points:
        buckets.setdefault(cell_of(p, cfg.r_min, cfg), []).append(p)

    accepted: list[CellKey] = []
    queue: deque[tuple[CellKey, int, list[GpsPoint]]] = deque()
    for cell in sorted(buckets, key=CellKey.sort_key):
        pts = buckets[cell]
        if len(pts) > capacity:
            queue.append((cell, cfg.r_min, pts))
        else:
            accepted.append(cell)
    buckets.clear()

    while queue:
        cell, r, pts = queue.popleft()
        if len(pts) > capacity and r < cfg.r_max:
            groups: dict[CellKey, list[GpsPoint]] = {}
            for p in pts:
                groups.setdefault(cell_of(p, r + 1, cfg), []).append(p)
            for child in sorted(groups, key=CellKey.sort_key):
                queue.append((child, r + 1, groups[child]))
        else:
            accepted.append(cell)

    accepted.sort(key=CellKey.sort_key)
    entries = [(cell, FIRST_CELL_ID + i) for i, cell in enumerate(accepted)]
    return Vocabulary(grid=cfg, capacity=capacity, entries=entries)


def recount(vocab: Vocabulary, points: Iterable[GpsPoint]) -> tuple[Counter, int]:
    """Re-bucket points by their vocabulary cell via ``Vocabulary.lookup``.

    Returns (per-token-id counts, number of UNK points). Used to verify
    the capacity invariant and training-point coverage.
    """
    counts: Counter = Counter()
    unk = 0
    for p in points:
        tid = vocab.lookup(p)
        if tid == UNK_ID:
            unk += 1
        else:
            counts[tid] += 1
    return counts, unk


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    lat_min, lat_max, lon_min, lon_max = vocab.grid.bbox
    lines = [
        f"version={VOCAB_FORMAT_VERSION}",
        f"backend={vocab.grid.backend}",
        f"bbox={lat_min!r},{lat_max!r},{lon_min!r},{lon_max!r}",
        f"rmin={vocab.grid.r_min}",
        f"rmax={vocab.grid.r_max}",
        f"capacity={vocab.capacity}",
        f"count={len(vocab.entries)}",
    ]
    lines += [f"{tid}\t{cell.resolution}\t{cell.index}" for cell, tid in vocab.entries]
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    Path(path).write_text(body + f"checksum=sha256:{digest}\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 8:
        raise VocabularyFormatError(f"{path}: truncated vocabulary file")
    checksum_line = lines[-1]
    if not checksum_line.startswith("checksum=sha256:"):
        raise VocabularyFormatError(f"{path}: missing checksum line")
    body = "\n".join(lines[:-1]) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if checksum_line != f"checksum=sha256:{digest}":
        raise VocabularyChecksumError(f"{path}: checksum mismatch")

    header = _parse_header(lines[:7], path)
    if header["version"] != str(VOCAB_FORMAT_VERSION):
        raise VocabularyVersionError(
            f"{path}: unsupported vocabulary version {header['version']!r}"
        )
    try:
        bbox = tuple(float(x) for x in header["bbox"].split(","))
        if len(bbox) != 4:
            raise ValueError
        cfg = GridConfig(
            backend=header["backend"],
            bbox=bbox,
            r_min=int(header["rmin"]),
            r_max=int(header["rmax"]),
        )
        capacity = int(header["capacity"])
        count = int(header["count"])
    except ValueError as exc:
        raise VocabularyFormatError(f"{path}: malformed header field: {exc}") from exc

    entry_lines = lines[7:-1]
    if len(entry_lines) != count:
        raise VocabularyFormatError(
            f"{path}: header declares {count} entries, found {len(entry_lines)}"
        )
    entries: list[tuple[CellKey, int]] = []
    for i, line in enumerate(entry_lines):
        parts = line.split("\t")
        if len(parts) != 3:
            raise VocabularyFormatError(f"{path}: malformed entry line {i}: {line!r}")
        try:
            tid, res, idx = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise VocabularyFormatError(f"{path}: non-integer entry line {i}") from exc
        if tid != FIRST_CELL_ID + i:
            raise VocabularyFormatError(f"{path}: token ids not dense at line {i}")
        entries.append((CellKey(cfg.backend, idx, res), tid))
    return Vocabulary(grid=cfg, capacity=capacity, entries=entries)


def _parse_header(lines: list[str], path) -> dict[str, str]:
    expected = ["version", "backend", "bbox", "rmin", "rmax", "capacity", "count"]
    header: dict[str, str] = {}
    for key, line in zip(expected, lines):
        if "=" not in line:
            raise VocabularyFormatError(f"{path}: malformed header line {line!r}")
        k, v = line.split("=", 1)
        if k != key:
            raise VocabularyFormatError(f"{path}: expected header key {key!r}, got {k!r}")
        header[k] = v
    return header
