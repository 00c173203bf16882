"""Cluster characterization: representative tiles, per-area mean cluster
representation, and per-cluster z-scored index profiles.

Areas are assigned to the cluster whose mean-pooled distance is smallest;
index z-scores use the population standard deviation over all modeled
areas, so the member-count weighted mean of the profiles is zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .augment import derive_rng
from .embedding import TileEmbedding
from .errors import ConfigError
from .pooling import PooledFeatures
from .synth import INDEX_NAMES

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterProfile:
    cluster: int
    representative_tiles: tuple[int, ...]   # sorted by ascending centre distance
    index_z_means: np.ndarray               # per index, INDEX_NAMES order
    member_areas: int
    empty: bool = False


def representatives(embeddings: list[TileEmbedding], k_cluster: int, m: int,
                    seed: int = 0) -> list[int]:
    """m tile ids sampled (seeded) from the 5m nearest to centre k_cluster.

    Clusters smaller than m return every member; an empty cluster returns
    an empty list with a warning.
    """
    members = [e for e in embeddings if e.cluster == k_cluster]
    if not members:
        logger.warning("cluster %d has no member tiles", k_cluster)
        return []
    members.sort(key=lambda e: (e.distances[k_cluster], e.tile_id))
    pool = members[:5 * m]
    if len(pool) <= m:
        chosen = pool
    else:
        idx = derive_rng(seed, k_cluster).choice(len(pool), size=m, replace=False)
        chosen = [pool[i] for i in sorted(idx)]
    chosen.sort(key=lambda e: (e.distances[k_cluster], e.tile_id))
    return [e.tile_id for e in chosen]


def area_cluster_representation(pooled_mean: dict[str, PooledFeatures],
                                ) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Per-area mean distances plus a rank-normalized column per cluster.

    Smaller distance means the area is more representative of the
    cluster. Ranks use the min-rank rule (count of strictly smaller
    values) scaled by the area count, so single areas and exact ties all
    land on 0.
    """
    if not pooled_mean:
        raise ConfigError("no pooled features given")
    area_ids = sorted(pooled_mean)
    dists = np.stack([pooled_mean[a].vector for a in area_ids])
    n = len(area_ids)
    ranks = np.zeros_like(dists)
    for j in range(dists.shape[1]):
        col = dists[:, j]
        ranks[:, j] = (col[:, None] > col[None, :]).sum(axis=1)
    ranks /= max(n - 1, 1)
    return area_ids, dists, ranks


def assign_areas_to_clusters(pooled_mean: dict[str, PooledFeatures]) -> dict[str, int]:
    """Argmin of the mean-pooled distance vector, ties to the lowest index."""
    return {a: int(np.argmin(p.vector)) for a, p in pooled_mean.items()}


def cluster_index_profile(area_clusters: dict[str, int],
                          indices: dict[str, np.ndarray],
                          embeddings: list[TileEmbedding] | None = None,
                          m_representatives: int = 8,
                          seed: int = 0) -> list[ClusterProfile]:
    """Mean z-scored indices per cluster over its member areas.

    Indices are z-scored per column across all modeled areas (population
    standard deviation; constant columns give z = 0). Clusters without
    member areas are emitted with the empty flag set.
    """
    area_ids = sorted(area_clusters)
    missing = [a for a in area_ids if a not in indices]
    if missing:
        raise ConfigError(f"areas without index rows: {missing[:5]}")
    matrix = np.stack([indices[a] for a in area_ids])
    mean = matrix.mean(axis=0)
    sd = matrix.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    z = (matrix - mean) / sd

    labels = np.array([area_clusters[a] for a in area_ids])
    profiles = []
    for c in range(int(labels.max()) + 1 if len(labels) else 0):
        member = labels == c
        reps = tuple(representatives(embeddings, c, m_representatives, seed)
                     ) if embeddings is not None else ()
        if member.any():
            profiles.append(ClusterProfile(
                cluster=c, representative_tiles=reps,
                index_z_means=z[member].mean(axis=0),
                member_areas=int(member.sum())))
        else:
            profiles.append(ClusterProfile(
                cluster=c, representative_tiles=reps,
                index_z_means=np.zeros(matrix.shape[1]),
                member_areas=0, empty=True))
    return profiles


# ---------------------------------------------------------------------------
# CSV / manifest emission
# ---------------------------------------------------------------------------


def write_area_representation_csv(pooled_mean: dict[str, PooledFeatures],
                                  path) -> None:
    area_ids, dists, ranks = area_cluster_representation(pooled_mean)
    k = dists.shape[1]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("area_id,"
                 + ",".join(f"d{j}" for j in range(k)) + ","
                 + ",".join(f"rank{j}" for j in range(k)) + "\n")
        for i, a in enumerate(area_ids):
            fh.write(a + ","
                     + ",".join(repr(float(v)) for v in dists[i]) + ","
                     + ",".join(repr(float(v)) for v in ranks[i]) + "\n")


def write_profiles_csv(profiles: list[ClusterProfile], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("cluster,member_areas,empty,"
                 + ",".join(f"z_{name}" for name in INDEX_NAMES) + "\n")
        for p in profiles:
            fh.write(f"{p.cluster},{p.member_areas},{int(p.empty)},"
                     + ",".join(repr(float(v)) for v in p.index_z_means) + "\n")


def write_tile_panel_manifest(profiles: list[ClusterProfile], path) -> None:
    import json
    doc = {str(p.cluster): list(map(int, p.representative_tiles)) for p in profiles}
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
