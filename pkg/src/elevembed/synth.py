"""Procedural elevation scenes with known structure.

Generates a lattice of rectangular areas, each drawn as one of four
settlement archetypes (buildings as flat-topped rectangles, canopy as
rounded bumps), together with seven synthetic area indices coupled to the
rendered content. The coupling is linear:

    index_j = alpha_j * b + beta_j * v + gamma_j * h + eps,
    b = building count / 50,  v = canopy blob count / 50,
    h = mean rendered height (m) / 10,  eps ~ Normal(0, noise_sd^2)

with the (alpha, beta, gamma) constants in `INDEX_COUPLING`. The scene is
a pure function of (seed, config): per-area draws come from streams
derived as SeedSequence([seed, area_index]) in the documented order
archetype, buildings, canopy, index noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .raster import AreaUnit, RasterGrid, write_areas, write_raster

INDEX_NAMES = ("income", "employment", "education", "health", "crime",
               "barriers", "living_env")

# (alpha: buildings, beta: vegetation, gamma: mean height) per index
INDEX_COUPLING = {
    "income": (18.0, -10.0, 8.0),
    "employment": (12.0, -6.0, 5.0),
    "education": (-20.0, 8.0, 14.0),
    "health": (10.0, -4.0, 12.0),
    "crime": (22.0, -14.0, 10.0),
    "barriers": (-8.0, 20.0, -6.0),
    "living_env": (26.0, -18.0, 20.0),
}

CANOPY_RADIUS_RANGE = (2.0, 8.0)  # cells


@dataclass(frozen=True)
class ArchetypeParams:
    name: str
    building_density: float          # buildings per area
    height_range: tuple[float, float]     # metres
    footprint_range: tuple[int, int]      # cells per building edge
    vegetation_density: float        # canopy blobs per area
    canopy_height_range: tuple[float, float]  # metres

    def __post_init__(self):
        for lo, hi in (self.height_range, self.footprint_range,
                       self.canopy_height_range):
            if lo < 0 or lo > hi:
                raise ConfigError(f"archetype {self.name!r}: bad range ({lo}, {hi})")
        if self.building_density < 0 or self.vegetation_density < 0:
            raise ConfigError(f"archetype {self.name!r}: densities must be >= 0")


def default_archetypes() -> list[ArchetypeParams]:
    """Four settlement archetypes: dense high-rise, detached suburban,
    flats/industrial suburban, and open rural with canopy."""
    return [
        ArchetypeParams("urban", 30, (10.0, 40.0), (8, 30), 4, (3.0, 8.0)),
        ArchetypeParams("suburban-detached", 18, (4.0, 9.0), (6, 14), 14, (4.0, 10.0)),
        ArchetypeParams("suburban-flats", 10, (8.0, 18.0), (14, 40), 5, (3.0, 8.0)),
        ArchetypeParams("rural", 1, (3.0, 6.0), (6, 12), 9, (5.0, 12.0)),
    ]


@dataclass
class SynthScene:
    grid: RasterGrid                      # normalized above-ground heights
    areas: list[AreaUnit]
    archetype_map: dict[str, str]         # area_id -> archetype name
    indices: dict[str, np.ndarray]        # area_id -> 7 values, INDEX_NAMES order
    factors: dict[str, np.ndarray] = field(default_factory=dict)  # (b, v, h)


def generate_scene(seed: int, areas_x: int, areas_y: int, area_side: int,
                   params: list[ArchetypeParams] | None = None,
                   noise_sd: float = 0.0, group_cols: int = 2,
                   tile_side: int | None = None) -> SynthScene:
    """Render a deterministic scene of areas_x x areas_y rectangular areas.

    area_side is the area edge in 1 m cells; group_cols adjacent columns of
    areas share a group_id (the district role for hold-out splits). If
    tile_side is given, area_side must divide into it cleanly.
    """
    if areas_x < 1 or areas_y < 1:
        raise ConfigError("areas_x and areas_y must be >= 1")
    if tile_side is not None and area_side % tile_side != 0:
        raise ConfigError(
            f"area_side {area_side} is not a multiple of tile side {tile_side}")
    params = params if params is not None else default_archetypes()
    if not params:
        raise ConfigError("need at least one archetype")

    rows, cols = areas_y * area_side, areas_x * area_side
    heights = np.zeros((rows, cols))
    areas: list[AreaUnit] = []
    archetype_map: dict[str, str] = {}
    indices: dict[str, np.ndarray] = {}
    factors: dict[str, np.ndarray] = {}

    for ay in range(areas_y):
        for ax in range(areas_x):
            area_index = ay * areas_x + ax
            area_id = f"a{area_index:04d}"
            rng = np.random.default_rng(np.random.SeedSequence([seed, area_index]))
            arch = params[int(rng.integers(len(params)))]

            r1 = rows - ay * area_side          # exclusive south edge (array row)
            r0 = r1 - area_side
            c0 = ax * area_side
            block = heights[r0:r1, c0:c0 + area_side]

            n_buildings = int(round(arch.building_density))
            for _ in range(n_buildings):
                _stamp_building(block, rng, arch, area_side)
            n_canopy = int(round(arch.vegetation_density))
            for _ in range(n_canopy):
                _stamp_canopy(block, rng, arch, area_side)
            np.round(block, 3, out=block)  # 1 mm quantization keeps .asc compact

            f = np.array([n_buildings / 50.0, n_canopy / 50.0,
                          float(block.mean()) / 10.0])
            eps = rng.normal(size=len(INDEX_NAMES)) * noise_sd
            vals = np.array([np.dot(INDEX_COUPLING[name], f) + eps[k]
                             for k, name in enumerate(INDEX_NAMES)])

            x0, y0 = float(ax * area_side), float(ay * area_side)
            x1, y1 = x0 + area_side, y0 + area_side
            areas.append(AreaUnit(id=area_id,
                                  polygon=[(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
                                  group_id=f"g{ax // group_cols:02d}"))
            archetype_map[area_id] = arch.name
            indices[area_id] = vals
            factors[area_id] = f

    grid = RasterGrid(rows=rows, cols=cols, cell_size=1.0, origin_x=0.0,
                      origin_y=0.0, nodata=-9999.0, values=heights)
    return SynthScene(grid=grid, areas=areas, archetype_map=archetype_map,
                      indices=indices, factors=factors)


def _stamp_building(block: np.ndarray, rng: np.random.Generator,
                    arch: ArchetypeParams, area_side: int) -> None:
    lo, hi = arch.footprint_range
    lo = max(1, min(lo, area_side))
    hi = max(lo, min(hi, area_side))
    h_cells = int(rng.integers(lo, hi + 1))
    w_cells = int(rng.integers(lo, hi + 1))
    r = int(rng.integers(0, area_side - h_cells + 1))
    c = int(rng.integers(0, area_side - w_cells + 1))
    height = float(rng.uniform(*arch.height_range))
    patch = block[r:r + h_cells, c:c + w_cells]
    np.maximum(patch, height, out=patch)


def _stamp_canopy(block: np.ndarray, rng: np.random.Generator,
                  arch: ArchetypeParams, area_side: int) -> None:
    radius = float(rng.uniform(*CANOPY_RADIUS_RANGE))
    cr = float(rng.uniform(0, area_side))
    cc = float(rng.uniform(0, area_side))
    height = float(rng.uniform(*arch.canopy_height_range))
    r0, r1 = max(0, int(cr - radius) - 1), min(area_side, int(cr + radius) + 2)
    c0, c1 = max(0, int(cc - radius) - 1), min(area_side, int(cc + radius) + 2)
    if r0 >= r1 or c0 >= c1:
        return
    rr = np.arange(r0, r1)[:, None] + 0.5
    cc_grid = np.arange(c0, c1)[None, :] + 0.5
    d2 = ((rr - cr) ** 2 + (cc_grid - cc) ** 2) / radius ** 2
    bump = height * np.clip(1.0 - d2, 0.0, None) ** 2
    patch = block[r0:r1, c0:c1]
    np.maximum(patch, bump, out=patch)


# ---------------------------------------------------------------------------
# Scene emission
# ---------------------------------------------------------------------------


def synthetic_terrain(grid: RasterGrid) -> RasterGrid:
    """Gentle deterministic ground ramp under a normalized scene."""
    x = (np.arange(grid.cols) + 0.5) * grid.cell_size + grid.origin_x
    y = grid.origin_y + (grid.rows - np.arange(grid.rows) - 0.5) * grid.cell_size
    ground = np.round(10.0 + 0.002 * x[None, :] + 0.001 * y[:, None], 3)
    return RasterGrid(rows=grid.rows, cols=grid.cols, cell_size=grid.cell_size,
                      origin_x=grid.origin_x, origin_y=grid.origin_y,
                      nodata=grid.nodata, values=ground)


def write_indices_csv(indices: dict[str, np.ndarray], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("area_id," + ",".join(INDEX_NAMES) + "\n")
        for area_id in sorted(indices):
            fh.write(area_id + "," + ",".join(repr(float(v)) for v in indices[area_id]) + "\n")


def read_indices_csv(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        if header != ["area_id", *INDEX_NAMES]:
            raise ValidationError(f"unexpected indices header: {header}")
        out = {}
        for line in fh:
            parts = line.strip().split(",")
            out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out


def write_scene(scene: SynthScene, outdir) -> dict[str, str]:
    """Emit scene.asc (normalized), a surface/terrain pair, areas and indices.

    surface = terrain + scene heights, so the ingest path reproduces the
    scene via surface - terrain.
    """
    outdir.mkdir(parents=True, exist_ok=True)
    terrain = synthetic_terrain(scene.grid)
    surface = RasterGrid(rows=scene.grid.rows, cols=scene.grid.cols,
                         cell_size=scene.grid.cell_size,
                         origin_x=scene.grid.origin_x, origin_y=scene.grid.origin_y,
                         nodata=scene.grid.nodata,
                         values=np.round(terrain.values + scene.grid.values, 3))
    paths = {
        "scene": outdir / "scene.asc",
        "surface": outdir / "surface.asc",
        "terrain": outdir / "terrain.asc",
        "areas": outdir / "areas.geojson",
        "indices": outdir / "indices.csv",
    }
    write_raster(scene.grid, paths["scene"])
    write_raster(surface, paths["surface"])
    write_raster(terrain, paths["terrain"])
    write_areas(scene.areas, paths["areas"])
    write_indices_csv(scene.indices, paths["indices"])
    return {k: str(v) for k, v in paths.items()}
