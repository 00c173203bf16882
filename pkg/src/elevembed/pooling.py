"""Pool tile embeddings to area-level feature vectors.

Element-wise mean or max of the member distance vectors per area. Areas
with zero assigned tiles are reported, never fabricated; the pooled CSV
carries only covered areas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .embedding import TileEmbedding
from .errors import ConfigError, DimensionError
from .raster import TileAssignment

PoolMethod = Literal["mean", "max"]


@dataclass(frozen=True)
class PooledFeatures:
    area_id: str
    vector: np.ndarray
    method: str
    tile_count: int


def pool(embeddings: Iterable[TileEmbedding], assignment: TileAssignment,
         method: PoolMethod,
         area_ids: Iterable[str] | None = None,
         ) -> tuple[dict[str, PooledFeatures], list[str]]:
    """Aggregate member tiles per area.

    Unassigned tiles are skipped. Returns (pooled by area id, areas with
    zero covered tiles). If `area_ids` is given the coverage report spans
    exactly those areas; otherwise only areas seen in the assignment.
    """
    if method not in ("mean", "max"):
        raise ConfigError(f"unknown pooling method {method!r}")
    groups: dict[str, list[np.ndarray]] = {}
    width = None
    for emb in embeddings:
        area = assignment.area_for_tile.get(emb.tile_id)
        if area is None:
            continue
        if width is None:
            width = emb.distances.shape[0]
        elif emb.distances.shape[0] != width:
            raise DimensionError("mixed embedding widths across tiles")
        groups.setdefault(area, []).append(emb.distances)

    pooled: dict[str, PooledFeatures] = {}
    for area, vecs in groups.items():
        stack = np.stack(vecs)
        vector = stack.mean(axis=0) if method == "mean" else stack.max(axis=0)
        pooled[area] = PooledFeatures(area_id=area, vector=vector,
                                      method=method, tile_count=len(vecs))

    universe = set(area_ids) if area_ids is not None \
        else set(assignment.area_for_tile.values())
    missing = sorted(universe - set(pooled))
    return pooled, missing


def write_pooled_csv(pooled: dict[str, PooledFeatures], path) -> None:
    if not pooled:
        raise ConfigError("no pooled features to write")
    k = len(next(iter(pooled.values())).vector)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("area_id,method,n_tiles," + ",".join(f"d{j}" for j in range(k)) + "\n")
        for area_id in sorted(pooled):
            p = pooled[area_id]
            fh.write(f"{p.area_id},{p.method},{p.tile_count},"
                     + ",".join(repr(float(v)) for v in p.vector) + "\n")


def read_pooled_csv(path) -> dict[str, PooledFeatures]:
    out = {}
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:3] != ["area_id", "method", "n_tiles"]:
            raise ConfigError("unexpected pooled CSV header")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            out[parts[0]] = PooledFeatures(
                area_id=parts[0], method=parts[1], tile_count=int(parts[2]),
                vector=np.array([float(v) for v in parts[3:]]))
    return out
