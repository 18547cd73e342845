"""Hierarchical spatial partitions: a deterministic QUAD backend plus an
optional H3 hexagonal adapter behind the same interface.

QUAD backend
------------
Resolution ``r`` splits the configured bounding box into ``2^r x 2^r``
half-open lat/lon rectangles ``[lo, hi)`` (the bbox max edge belongs to the
last cell). Cells are identified by the row-major rectangle number
``row * 2^r + col`` where rows index latitude and columns longitude. The
aperture-4 hierarchy nests exactly: each cell's four children tile it.

HEX backend
-----------
Thin adapter over the ``h3`` package (optional dependency, aperture-7
hierarchy). Children of a hex cell do not tile it exactly; callers that
re-bucket points by cell (see the vocabulary builder) must bucket by
``cell_of`` at the finer resolution rather than by the child list.
"""

from __future__ import annotations

from dataclasses import dataclass

from .geo import GpsPoint

QUAD = "QUAD"
HEX = "HEX"

# Row-major quad indices must stay 64-bit representable: 4^30 < 2^63.
QUAD_MAX_RESOLUTION = 30
HEX_MAX_RESOLUTION = 15


class OutOfDomainError(ValueError):
    """Point falls outside the grid's configured bounding box."""


@dataclass(frozen=True, slots=True)
class CellKey:
    """One cell of a hierarchical partition: (backend, opaque index, resolution)."""

    backend: str
    index: int
    resolution: int

    def sort_key(self) -> tuple[int, int]:
        return (self.resolution, self.index)


@dataclass(frozen=True)
class GridConfig:
    """Backend selection plus bbox and the resolution range in use."""

    backend: str
    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max
    r_min: int
    r_max: int

    def __post_init__(self):
        if self.backend not in (QUAD, HEX):
            raise ValueError(f"unknown grid backend {self.backend!r}")
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0 <= self.r_min <= self.r_max <= max_resolution(self.backend):
            raise ValueError(f"bad resolution range [{self.r_min}, {self.r_max}]")


def max_resolution(backend: str) -> int:
    return QUAD_MAX_RESOLUTION if backend == QUAD else HEX_MAX_RESOLUTION


def cell_of(p: GpsPoint, r: int, cfg: GridConfig) -> CellKey:
    """Map a point to its cell at resolution ``r``. Pure and deterministic."""
    if not 0 <= r <= max_resolution(cfg.backend):
        raise ValueError(f"resolution {r} unsupported for {cfg.backend}")
    if cfg.backend == QUAD:
        return _quad_cell_of(p, r, cfg)
    h3 = _h3()
    return CellKey(HEX, h3.latlng_to_cell(p.lat, p.lon, r), r)


def children(c: CellKey) -> list[CellKey]:
    """Direct children at resolution r+1 (4 for QUAD, native set for HEX)."""
    if c.resolution >= max_resolution(c.backend):
        raise ValueError(f"cell already at max resolution {c.resolution}")
    if c.backend == QUAD:
        row, col = _quad_row_col(c)
        r = c.resolution + 1
        kids = [
            _quad_key(2 * row + dr, 2 * col + dc, r)
            for dr in (0, 1)
            for dc in (0, 1)
        ]
        return sorted(kids, key=CellKey.sort_key)
    h3 = _h3()
    kids = sorted(h3.cell_to_children(c.index, c.resolution + 1))
    return [CellKey(HEX, k, c.resolution + 1) for k in kids]


def parent(c: CellKey) -> CellKey:
    """Unique parent at resolution r-1."""
    if c.resolution <= 0:
        raise ValueError("root cell has no parent")
    if c.backend == QUAD:
        row, col = _quad_row_col(c)
        return _quad_key(row // 2, col // 2, c.resolution - 1)
    h3 = _h3()
    return CellKey(HEX, h3.cell_to_parent(c.index, c.resolution - 1), c.resolution - 1)


def is_ancestor(a: CellKey, b: CellKey) -> bool:
    """True iff repeated parent() from ``b`` reaches ``a`` (strict: never for a == b)."""
    if a.backend != b.backend:
        raise ValueError("cells from different backends are not comparable")
    if b.resolution <= a.resolution:
        return False
    if a.backend == QUAD:
        shift = b.resolution - a.resolution
        row_b, col_b = _quad_row_col(b)
        row_a, col_a = _quad_row_col(a)
        return (row_b >> shift) == row_a and (col_b >> shift) == col_a
    c = b
    while c.resolution > a.resolution:
        c = parent(c)
    return c == a


def cell_rect(c: CellKey, cfg: GridConfig) -> tuple[float, float, float, float]:
    """QUAD cell corners as (lat_lo, lat_hi, lon_lo, lon_hi)."""
    if c.backend != QUAD:
        raise ValueError("cell_rect is defined for the QUAD backend only")
    lat_min, lat_max, lon_min, lon_max = cfg.bbox
    n = 1 << c.resolution
    row, col = _quad_row_col(c)
    lat_span = lat_max - lat_min
    lon_span = lon_max - lon_min
    return (
        lat_min + lat_span * (row / n),
        lat_min + lat_span * ((row + 1) / n),
        lon_min + lon_span * (col / n),
        lon_min + lon_span * ((col + 1) / n),
    )


def cell_center(c: CellKey, cfg: GridConfig) -> tuple[float, float]:
    """Representative (lat, lon) of a cell."""
    if c.backend == QUAD:
        lat_lo, lat_hi, lon_lo, lon_hi = cell_rect(c, cfg)
        return (lat_lo + lat_hi) / 2.0, (lon_lo + lon_hi) / 2.0
    h3 = _h3()
    lat, lon = h3.cell_to_latlng(c.index)
    return lat, lon


def _quad_cell_of(p: GpsPoint, r: int, cfg: GridConfig) -> CellKey:
    lat_min, lat_max, lon_min, lon_max = cfg.bbox
    if not (lat_min <= p.lat <= lat_max and lon_min <= p.lon <= lon_max):
        raise OutOfDomainError(f"point ({p.lat}, {p.lon}) outside bbox {cfg.bbox}")
    n = 1 << r
    # Normalize once, then scale by the exact power of two: guarantees that
    # resolutions nest bit-exactly (floor(2u)//2 == floor(u)).
    u_lat = (p.lat - lat_min) / (lat_max - lat_min)
    u_lon = (p.lon - lon_min) / (lon_max - lon_min)
    row = min(int(u_lat * n), n - 1)
    col = min(int(u_lon * n), n - 1)
    return _quad_key(row, col, r)


def _quad_key(row: int, col: int, r: int) -> CellKey:
    return CellKey(QUAD, row * (1 << r) + col, r)


def _quad_row_col(c: CellKey) -> tuple[int, int]:
    n = 1 << c.resolution
    return c.index // n, c.index % n


def _h3():
    """Import the optional h3 package, normalizing v3/v4 API names."""
    try:
        import h3
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImportError(
            "the HEX backend requires the optional 'h3' package "
            "(pip install trajrep[hex])"
        ) from exc
    if not hasattr(h3, "latlng_to_cell"):  # pragma: no cover - h3 v3 shim
        class _V3Shim:
            @staticmethod
            def latlng_to_cell(lat, lon, r):
                return h3.string_to_h3(h3.geo_to_h3(lat, lon, r))

            @staticmethod
            def cell_to_children(cell, r):
                return [h3.string_to_h3(c) for c in h3.h3_to_children(h3.h3_to_string(cell), r)]

            @staticmethod
            def cell_to_parent(cell, r):
                return h3.string_to_h3(h3.h3_to_parent(h3.h3_to_string(cell), r))

            @staticmethod
            def cell_to_latlng(cell):
                return h3.h3_to_geo(h3.h3_to_string(cell))

        return _V3Shim
    if isinstance(h3.latlng_to_cell(0.0, 0.0, 0), str):  # pragma: no cover - v4 str API
        class _V4StrShim:
            @staticmethod
            def latlng_to_cell(lat, lon, r):
                return h3.str_to_int(h3.latlng_to_cell(lat, lon, r))

            @staticmethod
            def cell_to_children(cell, r):
                return [h3.str_to_int(c) for c in h3.cell_to_children(h3.int_to_str(cell), r)]

            @staticmethod
            def cell_to_parent(cell, r):
                return h3.str_to_int(h3.cell_to_parent(h3.int_to_str(cell), r))

            @staticmethod
            def cell_to_latlng(cell):
                return h3.cell_to_latlng(h3.int_to_str(cell))

        return _V4StrShim
    return h3
