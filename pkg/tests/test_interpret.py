import numpy as np
import pytest

from elevembed.embedding import TileEmbedding
from elevembed.interpret import (
    area_cluster_representation,
    assign_areas_to_clusters,
    cluster_index_profile,
    representatives,
)
from elevembed.pooling import PooledFeatures, pool
from elevembed.raster import TileAssignment
from elevembed.synth import INDEX_NAMES


def emb(tid, dists):
    dists = np.asarray(dists, dtype=float)
    return TileEmbedding(tile_id=tid, distances=dists,
                         cluster=int(np.argmin(dists)))


def cluster_of_embeddings(n, center_distances, seed=0):
    """n members of cluster 0 with the given distances to centre 0."""
    out = []
    for i, d in enumerate(center_distances):
        out.append(emb(i, [d, d + 10.0]))
    return out


class TestRepresentatives:
    def test_cluster_of_exactly_m_returns_all(self):
        embs = cluster_of_embeddings(3, [0.5, 0.2, 0.9])
        ids = representatives(embs, k_cluster=0, m=3)
        assert sorted(ids) == [0, 1, 2]

    def test_zero_distance_tile_always_in_pool(self):
        dists = [0.0] + [1.0 + i for i in range(19)]
        embs = cluster_of_embeddings(20, dists)
        for seed in range(10):
            ids = representatives(embs, 0, m=2, seed=seed)
            pool_ids = set(range(10))  # 5m = 10 nearest
            assert set(ids) <= pool_ids

    def test_sampled_within_5m_smallest(self):
        rng = np.random.default_rng(3)
        dists = rng.uniform(0, 100, size=20)
        embs = cluster_of_embeddings(20, dists)
        order = np.argsort(dists, kind="stable")
        pool = set(order[:15].tolist())
        ids = representatives(embs, 0, m=3, seed=7)
        assert len(ids) == 3
        assert set(ids) <= pool

    def test_returned_sorted_by_distance(self):
        rng = np.random.default_rng(4)
        dists = rng.uniform(0, 10, size=30)
        embs = cluster_of_embeddings(30, dists)
        ids = representatives(embs, 0, m=4, seed=1)
        vals = [dists[i] for i in ids]
        assert vals == sorted(vals)

    def test_empty_cluster_warns_empty_list(self):
        embs = cluster_of_embeddings(3, [0.1, 0.2, 0.3])  # all cluster 0
        assert representatives(embs, k_cluster=1, m=2) == []


class TestAreaRepresentation:
    def pooled(self, mapping):
        return {a: PooledFeatures(area_id=a, vector=np.asarray(v, float),
                                  method="mean", tile_count=1)
                for a, v in mapping.items()}

    def test_single_area_ranks_zero(self):
        _, dists, ranks = area_cluster_representation(self.pooled({"a": [1.0, 2.0]}))
        assert np.all(ranks == 0.0)

    def test_all_equal_ranks_zero_min_rank(self):
        pooled = self.pooled({"a": [1.0, 2.0], "b": [1.0, 2.0], "c": [1.0, 2.0]})
        _, _, ranks = area_cluster_representation(pooled)
        assert np.all(ranks == 0.0)

    def test_rank_ordering(self):
        pooled = self.pooled({"a": [1.0], "b": [3.0], "c": [2.0]})
        ids, dists, ranks = area_cluster_representation(pooled)
        assert ids == ["a", "b", "c"]
        assert ranks[:, 0].tolist() == [0.0, 1.0, 0.5]

    def test_argmin_assignment(self):
        pooled = self.pooled({"a": [1.0, 2.0], "b": [5.0, 0.5]})
        assert assign_areas_to_clusters(pooled) == {"a": 0, "b": 1}


class TestClusterIndexProfile:
    def test_identical_indices_zero_profiles(self):
        clusters = {"a": 0, "b": 0, "c": 1}
        indices = {k: np.full(7, 9.0) for k in clusters}
        profiles = cluster_index_profile(clusters, indices)
        for p in profiles:
            assert np.allclose(p.index_z_means, 0.0)

    def test_binary_split_symmetric_profiles(self):
        # four areas, first index splits the clusters apart
        vals = {"a": 0.0, "b": 0.0, "c": 10.0, "d": 10.0}
        clusters = {"a": 0, "b": 0, "c": 1, "d": 1}
        indices = {k: np.array([v] + [5.0] * 6) for k, v in vals.items()}
        profiles = cluster_index_profile(clusters, indices)
        z0 = profiles[0].index_z_means[0]
        z1 = profiles[1].index_z_means[0]
        assert z0 == pytest.approx(-1.0)   # population sd of {0,0,10,10} is 5
        assert z1 == pytest.approx(1.0)
        assert z0 == pytest.approx(-z1)

    def test_weighted_mean_zero(self):
        rng = np.random.default_rng(5)
        clusters = {f"a{i}": int(rng.integers(0, 3)) for i in range(30)}
        indices = {a: rng.uniform(0, 100, size=7) for a in clusters}
        profiles = cluster_index_profile(clusters, indices)
        weighted = sum(p.index_z_means * p.member_areas for p in profiles)
        assert np.allclose(weighted / 30.0, 0.0, atol=1e-9)

    def test_empty_cluster_flagged(self):
        clusters = {"a": 0, "b": 2}
        indices = {"a": np.arange(7.0), "b": np.arange(7.0) * 2}
        profiles = cluster_index_profile(clusters, indices)
        assert profiles[1].empty and profiles[1].member_areas == 0

    def test_representatives_attached(self):
        clusters = {"a": 0, "b": 1}
        indices = {"a": np.arange(7.0), "b": np.arange(7.0) * 2}
        embs = [emb(1, [0.1, 5.0]), emb(2, [4.0, 0.2]), emb(3, [0.3, 5.0])]
        profiles = cluster_index_profile(clusters, indices, embeddings=embs, m_representatives=2)
        assert set(profiles[0].representative_tiles) == {1, 3}
        assert profiles[1].representative_tiles == (2,)


@pytest.fixture(scope="module")
def scene_clusters():
    """Full small-scene pipeline: the clusters learned by the encoder and
    K-means should line up with the generator's archetype ground truth."""
    from collections import Counter

    from elevembed.augment import AugmentSpec
    from elevembed.contrastive import (ContrastiveConfig,
                                       extract_representations, train_simclr)
    from elevembed.embedding import fit_pipeline, transform
    from elevembed.encoder import ConvStage, EncoderConfig, init_encoder
    from elevembed.experiment import build_split
    from elevembed.raster import assign_by_centroid, tile_grid
    from elevembed.synth import generate_scene

    scene = generate_scene(9, areas_x=8, areas_y=8, area_side=64,
                           noise_sd=1.0, group_cols=1)
    tiles = tile_grid(scene.grid, 32)
    assignment = assign_by_centroid(tiles, scene.areas)
    plan = build_split(scene.areas, "g00", "g04", seed=3)
    train_areas = set(plan.train)
    keep = np.array([assignment.area_for_tile.get(int(t)) in train_areas
                     for t in tiles.ids])

    cfg = EncoderConfig(input_side=32,
                        conv_stages=(ConvStage(8), ConvStage(16), ConvStage(32)),
                        head_dims=(64, 64, 64, 64), projection_dim=32)
    trained, _ = train_simclr(tiles.subset(keep), init_encoder(cfg, seed=2),
                              AugmentSpec(),
                              ContrastiveConfig(batch_pairs=16, epochs=6, seed=4))
    ids, reps = extract_representations(trained, tiles, tap="L1")
    train_ids = {int(t) for t in tiles.ids[keep]}
    rows = np.array([int(t) in train_ids for t in ids])
    pipe = fit_pipeline(reps[rows], k=4, seed=13)
    embs = transform(ids, reps, pipe)
    pooled, _ = pool(embs, TileAssignment(assignment.area_for_tile), "mean")
    clusters = assign_areas_to_clusters(pooled)
    dominant = {}
    for arch in set(scene.archetype_map.values()):
        members = [clusters[a] for a in clusters
                   if scene.archetype_map[a] == arch]
        dominant[arch] = Counter(members).most_common(1)[0][0]
    return scene, clusters, dominant

def test_areas_map_to_their_archetypes_dominant_cluster(scene_clusters):
    scene, clusters, dominant = scene_clusters
    hits = sum(clusters[a] == dominant[scene.archetype_map[a]]
               for a in clusters)
    assert hits / len(clusters) >= 0.75

def test_urban_living_env_z_exceeds_rural(scene_clusters):
    from elevembed.synth import INDEX_NAMES

    scene, clusters, dominant = scene_clusters
    assert dominant["urban"] != dominant["rural"]
    profiles = cluster_index_profile(clusters, scene.indices)
    le = INDEX_NAMES.index("living_env")
    assert (profiles[dominant["urban"]].index_z_means[le]
            > profiles[dominant["rural"]].index_z_means[le])
