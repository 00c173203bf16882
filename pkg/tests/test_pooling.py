import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elevembed.embedding import TileEmbedding
from elevembed.errors import ConfigError, DimensionError
from elevembed.pooling import pool, read_pooled_csv, write_pooled_csv
from elevembed.raster import TileAssignment


def emb(tid, dists):
    dists = np.asarray(dists, dtype=float)
    return TileEmbedding(tile_id=tid, distances=dists,
                         cluster=int(np.argmin(dists)))


def assignment_of(mapping):
    return TileAssignment(area_for_tile=dict(mapping))


def test_mean_pool():
    asg = assignment_of({1: "a", 2: "a"})
    pooled, missing = pool([emb(1, [1, 3]), emb(2, [3, 5])], asg, "mean")
    assert pooled["a"].vector.tolist() == [2.0, 4.0]
    assert pooled["a"].tile_count == 2
    assert missing == []


def test_max_pool():
    asg = assignment_of({1: "a", 2: "a"})
    pooled, _ = pool([emb(1, [1, 3]), emb(2, [3, 5])], asg, "max")
    assert pooled["a"].vector.tolist() == [3.0, 5.0]


def test_singleton_area_same_under_both():
    asg = assignment_of({1: "a"})
    for method in ("mean", "max"):
        pooled, _ = pool([emb(1, [2, 7, 4])], asg, method)
        assert pooled["a"].vector.tolist() == [2.0, 7.0, 4.0]


def test_unassigned_tiles_skipped_and_missing_reported():
    asg = assignment_of({1: "a"})
    pooled, missing = pool([emb(1, [1.0]), emb(9, [5.0])], asg, "mean",
                           area_ids=["a", "b"])
    assert set(pooled) == {"a"}
    assert missing == ["b"]


def test_mixed_widths_rejected():
    asg = assignment_of({1: "a", 2: "a"})
    with pytest.raises(DimensionError):
        pool([emb(1, [1, 2]), emb(2, [1, 2, 3])], asg, "mean")


def test_unknown_method_rejected():
    with pytest.raises(ConfigError):
        pool([], assignment_of({}), "median")


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_mean_le_max_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    vecs = rng.uniform(0, 10, size=(n, 4))
    asg = assignment_of({i: "a" for i in range(n)})
    embs = [emb(i, vecs[i]) for i in range(n)]
    mean_p, _ = pool(embs, asg, "mean")
    max_p, _ = pool(embs, asg, "max")
    assert np.all(mean_p["a"].vector <= max_p["a"].vector + 1e-12)
    perm = list(rng.permutation(n))
    mean_q, _ = pool([embs[i] for i in perm], asg, "mean")
    assert np.allclose(mean_p["a"].vector, mean_q["a"].vector)


def test_duplicating_members_leaves_pools_unchanged():
    rng = np.random.default_rng(5)
    vecs = rng.uniform(0, 5, size=(3, 4))
    embs = [emb(i, vecs[i]) for i in range(3)]
    doubled = embs + [emb(i + 10, vecs[i]) for i in range(3)]
    asg = assignment_of({i: "a" for i in range(3)})
    asg_doubled = assignment_of({**asg.area_for_tile,
                                 **{i + 10: "a" for i in range(3)}})
    for method in ("mean", "max"):
        once, _ = pool(embs, asg, method)
        twice, _ = pool(doubled, asg_doubled, method)
        assert np.allclose(once["a"].vector, twice["a"].vector)


def test_pooled_csv_roundtrip(tmp_path):
    asg = assignment_of({1: "a", 2: "b"})
    pooled, _ = pool([emb(1, [1.5, 2.5]), emb(2, [0.25, 9.0])], asg, "mean")
    p = tmp_path / "pooled.csv"
    write_pooled_csv(pooled, p)
    back = read_pooled_csv(p)
    assert set(back) == {"a", "b"}
    assert np.array_equal(back["a"].vector, pooled["a"].vector)
    assert back["b"].tile_count == 1 and back["b"].method == "mean"
