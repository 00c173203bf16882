"""Elevation rasters: ESRI ASCII grid I/O, surface normalization, tiling,
and centroid-based assignment of tiles to area polygons.

Grid convention: `values[0, :]` is the northernmost row (file order), the
georeferenced origin (`origin_x`, `origin_y`) is the lower-left corner of
the grid footprint. Cell (r, c) therefore has its centre at

    x = origin_x + (c + 0.5) * cell_size
    y = origin_y + (rows - r - 0.5) * cell_size
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Literal

import numpy as np

from .errors import DimensionError, FormatError, ParseError, ValidationError

_ASC_HEADER_FIELDS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")

TILE_STORE_MAGIC = b"TERR"


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RasterGrid:
    """Georeferenced 2-D elevation array (metres)."""

    rows: int
    cols: int
    cell_size: float
    origin_x: float
    origin_y: float
    nodata: float
    values: np.ndarray  # (rows, cols) float64, northernmost row first

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("grid must have at least one row and column")
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        if self.values.shape != (self.rows, self.cols):
            raise DimensionError(
                f"values shape {self.values.shape} != ({self.rows}, {self.cols})")

    @property
    def nodata_mask(self) -> np.ndarray:
        """Boolean mask of cells carrying the nodata sentinel."""
        return self.values == self.nodata

    def same_georeference(self, other: "RasterGrid") -> bool:
        return (self.rows == other.rows and self.cols == other.cols
                and self.cell_size == other.cell_size
                and self.origin_x == other.origin_x
                and self.origin_y == other.origin_y)


@dataclass(frozen=True)
class Tile:
    """Fixed-size normalized elevation patch."""

    id: int
    side: int
    elevations: np.ndarray  # (side, side) float32, northernmost row first
    centroid_x: float
    centroid_y: float


class TileSet:
    """Tiles of one common side, stored densely for batch processing."""

    def __init__(self, side: int, ids: np.ndarray, centroids: np.ndarray,
                 elevations: np.ndarray):
        ids = np.asarray(ids, dtype=np.uint64)
        centroids = np.asarray(centroids, dtype=np.float64)
        elevations = np.asarray(elevations, dtype=np.float32)
        if elevations.shape != (len(ids), side, side):
            raise DimensionError("elevations must be (n_tiles, side, side)")
        if centroids.shape != (len(ids), 2):
            raise DimensionError("centroids must be (n_tiles, 2)")
        if not np.all(np.isfinite(elevations)):
            raise ValidationError("tile elevations must be finite")
        self.side = side
        self.ids = ids
        self.centroids = centroids
        self.elevations = elevations

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Tile]:
        for i in range(len(self.ids)):
            yield self[i]

    def __getitem__(self, i: int) -> Tile:
        return Tile(id=int(self.ids[i]), side=self.side,
                    elevations=self.elevations[i],
                    centroid_x=float(self.centroids[i, 0]),
                    centroid_y=float(self.centroids[i, 1]))

    def subset(self, keep: np.ndarray) -> "TileSet":
        """New TileSet restricted to a boolean mask or index array."""
        return TileSet(self.side, self.ids[keep], self.centroids[keep],
                       self.elevations[keep])


@dataclass(frozen=True)
class AreaUnit:
    """Polygonal statistical area with its enclosing group (district)."""

    id: str
    polygon: list[tuple[float, float]]
    group_id: str

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise ValidationError(f"area {self.id!r}: polygon needs >= 3 vertices")
        if not self.group_id:
            raise ValidationError(f"area {self.id!r}: missing group_id")


@dataclass
class TileAssignment:
    """Partial map tile_id -> area_id; tiles outside all areas are listed."""

    area_for_tile: dict[int, str] = field(default_factory=dict)
    unassigned: list[int] = field(default_factory=list)

    def tiles_for_area(self, area_id: str) -> list[int]:
        return [t for t, a in self.area_for_tile.items() if a == area_id]


# ---------------------------------------------------------------------------
# ESRI ASCII grid I/O
# ---------------------------------------------------------------------------


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_raster(path) -> RasterGrid:
    """Parse an ESRI ASCII grid (.asc).

    The 6-line header must declare ncols, nrows, xllcorner, yllcorner,
    cellsize and NODATA_value; the body holds nrows x ncols numbers,
    northernmost row first.
    """
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    tokens = text.split()
    header: dict[str, float] = {}
    pos = 0
    for _ in range(6):
        if pos + 1 >= len(tokens):
            raise ParseError("header ended early: expected 6 key/value lines")
        key = tokens[pos].lower()
        try:
            val = float(tokens[pos + 1])
        except ValueError:
            raise ParseError(f"header field {key!r}: non-numeric value {tokens[pos + 1]!r}")
        header[key] = val
        pos += 2
    for name in _ASC_HEADER_FIELDS:
        if name not in header:
            raise ParseError(f"missing header field {name!r}")
    if "nodata_value" not in header:
        raise ParseError("missing header field 'NODATA_value'")
    rows, cols = int(header["nrows"]), int(header["ncols"])
    if rows < 1 or cols < 1:
        raise ParseError("nrows and ncols must be positive")

    body = tokens[pos:]
    if len(body) != rows * cols:
        raise ParseError(f"expected {rows * cols} values, found {len(body)}")
    try:
        values = np.array(body, dtype=np.float64)
    except ValueError:
        bad = next(t for t in body if not _is_number(t))
        raise ParseError(f"non-numeric cell value {bad!r}")
    return RasterGrid(rows=rows, cols=cols, cell_size=header["cellsize"],
                      origin_x=header["xllcorner"], origin_y=header["yllcorner"],
                      nodata=header["nodata_value"],
                      values=values.reshape(rows, cols))


def write_raster(grid: RasterGrid, path) -> None:
    """Write an ESRI ASCII grid; numeric content round-trips exactly."""
    lines = [
        f"ncols {grid.cols}",
        f"nrows {grid.rows}",
        f"xllcorner {grid.origin_x!r}",
        f"yllcorner {grid.origin_y!r}",
        f"cellsize {grid.cell_size!r}",
        f"NODATA_value {grid.nodata!r}",
    ]
    for r in range(grid.rows):
        lines.append(" ".join(repr(float(v)) for v in grid.values[r]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Normalization and tiling
# ---------------------------------------------------------------------------


def normalize_elevation(surface: RasterGrid, terrain: RasterGrid) -> RasterGrid:
    """Above-ground height: surface minus bare-earth terrain.

    Any cell that is nodata in either input is nodata in the output, so
    the result is independent of the absolute ground level.
    """
    if not surface.same_georeference(terrain):
        raise DimensionError("surface and terrain grids must share shape and georeference")
    out = surface.values - terrain.values
    bad = surface.nodata_mask | terrain.nodata_mask
    nodata = surface.nodata
    out[bad] = nodata
    # a legitimate difference may collide with the sentinel; nudge it off
    collide = ~bad & (out == nodata)
    if np.any(collide):
        out[collide] = np.nextafter(nodata, np.inf)
    return RasterGrid(rows=surface.rows, cols=surface.cols,
                      cell_size=surface.cell_size, origin_x=surface.origin_x,
                      origin_y=surface.origin_y, nodata=nodata, values=out)


def tile_grid(grid: RasterGrid, side: int,
              nodata_policy: Literal["impute-zero", "drop-tile"] = "impute-zero",
              ) -> TileSet:
    """Slice a grid into non-overlapping side x side tiles.

    The tile lattice is anchored at the grid origin (lower-left corner);
    partial tiles along the top/right edges are discarded. Tile ids number
    the lattice row-major from the origin. Under ``impute-zero`` nodata
    cells become 0 m; under ``drop-tile`` any tile containing nodata is
    omitted.
    """
    if side < 8:
        raise DimensionError("tile side must be >= 8 cells")
    if side > min(grid.rows, grid.cols):
        raise DimensionError(
            f"tile side {side} exceeds grid extent {min(grid.rows, grid.cols)}")
    tiles_y = grid.rows // side
    tiles_x = grid.cols // side
    mask = grid.nodata_mask

    ids, cents, elevs = [], [], []
    for ti in range(tiles_y):          # counted from the origin (south) upward
        r1 = grid.rows - ti * side     # exclusive bottom row of the slice
        r0 = r1 - side
        for tj in range(tiles_x):
            c0 = tj * side
            patch = grid.values[r0:r1, c0:c0 + side]
            bad = mask[r0:r1, c0:c0 + side]
            if bad.any():
                if nodata_policy == "drop-tile":
                    continue
                patch = patch.copy()
                patch[bad] = 0.0
            ids.append(ti * tiles_x + tj)
            cents.append((grid.origin_x + (c0 + side / 2.0) * grid.cell_size,
                          grid.origin_y + (ti * side + side / 2.0) * grid.cell_size))
            elevs.append(patch.astype(np.float32))
    if ids:
        return TileSet(side, np.array(ids, dtype=np.uint64),
                       np.array(cents, dtype=np.float64),
                       np.stack(elevs))
    return TileSet(side, np.empty(0, dtype=np.uint64),
                   np.empty((0, 2)), np.empty((0, side, side), dtype=np.float32))


def area_mean_resize(img: np.ndarray, out_side: int) -> np.ndarray:
    """Area-weighted mean resize of a square image to out_side x out_side.

    Each output pixel averages the input region it covers, with fractional
    rows/columns weighted by overlap, so non-integer ratios are exact.
    """
    in_side = img.shape[0]
    if img.shape != (in_side, in_side):
        raise DimensionError("area_mean_resize expects a square image")
    if out_side == in_side:
        return img.astype(np.float64)
    w = _overlap_weights(in_side, out_side)
    return w @ img.astype(np.float64) @ w.T


@lru_cache(maxsize=32)
def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix of interval overlap fractions."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / scale


# ---------------------------------------------------------------------------
# Areas: GeoJSON subset and point-in-polygon assignment
# ---------------------------------------------------------------------------


def load_areas(path) -> list[AreaUnit]:
    """Read a FeatureCollection of Polygon features with id/group_id.

    Only exterior rings are honoured; a closing repeated vertex is dropped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ParseError("expected a GeoJSON FeatureCollection")
    areas = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ParseError(f"feature {i}: only Polygon geometry is supported")
        props = feat.get("properties") or {}
        if "id" not in props or "group_id" not in props:
            raise ParseError(f"feature {i}: properties need 'id' and 'group_id'")
        ring = [(float(x), float(y)) for x, y in geom["coordinates"][0]]
        if len(ring) >= 2 and ring[0] == ring[-1]:
            ring = ring[:-1]
        areas.append(AreaUnit(id=str(props["id"]), polygon=ring,
                              group_id=str(props["group_id"])))
    return areas


def write_areas(areas: list[AreaUnit], path) -> None:
    feats = []
    for a in areas:
        ring = [[x, y] for x, y in a.polygon] + [[a.polygon[0][0], a.polygon[0][1]]]
        feats.append({"type": "Feature",
                      "geometry": {"type": "Polygon", "coordinates": [ring]},
                      "properties": {"id": a.id, "group_id": a.group_id}})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh, indent=1)
        fh.write("\n")


def polygon_area(polygon: list[tuple[float, float]]) -> float:
    """Signed shoelace area."""
    n = len(polygon)
    s = 0.0
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s / 2.0


def point_in_polygon(x: float, y: float, polygon: list[tuple[float, float]]) -> bool:
    """Even-odd ray-casting containment; boundary points count as inside."""
    n = len(polygon)
    inside = False
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        # exact on-segment test (boundary points are inside)
        if (min(x0, x1) <= x <= max(x0, x1) and min(y0, y1) <= y <= max(y0, y1)
                and (x1 - x0) * (y - y0) == (y1 - y0) * (x - x0)):
            return True
        if (y0 > y) != (y1 > y):
            x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < x_cross:
                inside = not inside
    return inside


def assign_by_centroid(tiles: TileSet, areas: list[AreaUnit]) -> TileAssignment:
    """Map each tile to the first containing area in ascending area-id order.

    The ascending-id scan makes boundary centroids deterministic: a point
    on a shared edge goes to the lower area id. Tiles inside no area are
    reported unassigned.
    """
    for a in areas:
        if polygon_area(a.polygon) == 0.0:
            raise ValidationError(f"area {a.id!r}: degenerate polygon (zero area)")
    ordered = sorted(areas, key=lambda a: a.id)
    bboxes = [(min(p[0] for p in a.polygon), min(p[1] for p in a.polygon),
               max(p[0] for p in a.polygon), max(p[1] for p in a.polygon))
              for a in ordered]
    assignment = TileAssignment()
    for i in range(len(tiles.ids)):
        x, y = tiles.centroids[i]
        tid = int(tiles.ids[i])
        for a, (x0, y0, x1, y1) in zip(ordered, bboxes):
            if x0 <= x <= x1 and y0 <= y <= y1 and point_in_polygon(x, y, a.polygon):
                assignment.area_for_tile[tid] = a.id
                break
        else:
            assignment.unassigned.append(tid)
    return assignment


# ---------------------------------------------------------------------------
# Tile store (binary)
# ---------------------------------------------------------------------------


def write_tile_store(tiles: TileSet, path) -> None:
    """magic "TERR", u16 version=1, u32 side, u64 count, then per tile:
    u64 id, f64 centroid_x, f64 centroid_y, side^2 little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(TILE_STORE_MAGIC)
        fh.write(struct.pack("<HIQ", 1, tiles.side, len(tiles)))
        for i in range(len(tiles)):
            fh.write(struct.pack("<Qdd", int(tiles.ids[i]),
                                 float(tiles.centroids[i, 0]),
                                 float(tiles.centroids[i, 1])))
            fh.write(tiles.elevations[i].astype("<f4", copy=False).tobytes())


def read_tile_store(path) -> TileSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TILE_STORE_MAGIC:
        raise FormatError("bad tile store magic")
    version, side, count = struct.unpack_from("<HIQ", data, 4)
    if version != 1:
        raise FormatError(f"unsupported tile store version {version}")
    rec = 8 + 8 + 8 + 4 * side * side
    if len(data) != 18 + rec * count:
        raise FormatError(f"tile store length {len(data)} != expected {18 + rec * count}")
    ids = np.empty(count, dtype=np.uint64)
    cents = np.empty((count, 2))
    elevs = np.empty((count, side, side), dtype=np.float32)
    off = 18
    for i in range(count):
        tid, cx, cy = struct.unpack_from("<Qdd", data, off)
        ids[i] = tid
        cents[i] = (cx, cy)
        elevs[i] = np.frombuffer(data, dtype="<f4", count=side * side,
                                 offset=off + 24).reshape(side, side)
        off += rec
    return TileSet(side, ids, cents, elevs)
