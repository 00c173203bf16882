import numpy as np
import pytest

from elevembed.errors import ConfigError
from elevembed.experiment import (
    ExperimentSpec,
    ResultRow,
    assemble_features,
    build_split,
    demographic_columns,
    grid_specs,
    improvement_pct,
    run_grid,
)
from elevembed.pooling import PooledFeatures
from elevembed.raster import AreaUnit
from elevembed.synth import INDEX_NAMES


def lattice_areas(n, group_size=10):
    areas = []
    for i in range(n):
        x = float(i)
        areas.append(AreaUnit(id=f"a{i:04d}",
                              polygon=[(x, 0), (x + 1, 0), (x + 1, 1), (x, 1)],
                              group_id=f"g{i // group_size:02d}"))
    return areas


class TestBuildSplit:
    def test_quota_arithmetic(self):
        # 100 areas, hold-out group of 9: 9 group areas + 11 random fill
        areas = lattice_areas(100, group_size=9)
        plan = build_split(areas, group_for_test="g00", group_for_val="g01", seed=1)
        assert len(plan.test) == 20 and len(plan.val) == 20 and len(plan.train) == 60
        group_members = {a.id for a in areas if a.group_id == "g00"}
        assert group_members <= set(plan.test)
        assert len(set(plan.test) - group_members) == 11

    def test_group_fill_ratio(self):
        # a group supplying 46% of the quota leaves 54% to the random fill
        areas = lattice_areas(500, group_size=46)
        plan = build_split(areas, group_for_test="g00", group_for_val="g01", seed=2)
        quota = round(0.2 * 500)
        group_members = {a.id for a in areas if a.group_id == "g00"}
        assert len(group_members) / quota == pytest.approx(0.46)
        assert (len(plan.test) - len(group_members)) / quota == pytest.approx(0.54)

    def test_deterministic(self):
        areas = lattice_areas(60, group_size=6)
        a = build_split(areas, "g00", "g01", seed=9)
        b = build_split(areas, "g00", "g01", seed=9)
        assert a == b

    def test_partition_disjoint_exhaustive(self):
        areas = lattice_areas(83, group_size=7)
        plan = build_split(areas, "g02", "g05", seed=3)
        parts = [set(plan.train), set(plan.val), set(plan.test)]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert parts[0] | parts[1] | parts[2] == {a.id for a in areas}
        n = len(areas)
        assert abs(len(plan.test) - 0.2 * n) <= 1
        assert abs(len(plan.val) - 0.2 * n) <= 1

    def test_oversized_group_rejected(self):
        areas = lattice_areas(40, group_size=20)
        with pytest.raises(ConfigError):
            build_split(areas, "g00", "g01", seed=0)

    def test_same_group_twice_rejected(self):
        areas = lattice_areas(40, group_size=5)
        with pytest.raises(ConfigError):
            build_split(areas, "g00", "g00", seed=0)


def fake_indices(area_ids, seed=0):
    rng = np.random.default_rng(seed)
    return {a: rng.uniform(0, 50, size=7) for a in area_ids}


def fake_pooled(area_ids, k, seed=0):
    rng = np.random.default_rng(seed)
    return {a: PooledFeatures(area_id=a, vector=rng.uniform(0, 5, size=k),
                              method="mean", tile_count=3) for a in area_ids}


class TestAssembleFeatures:
    def test_combined_width_6_plus_k(self):
        ids = [f"a{i:04d}" for i in range(10)]
        spec = ExperimentSpec(domain="income", subset="combined", source="simclr",
                              layer="L1", k=512, pooling="mean", model="lasso")
        x, y, used = assemble_features(spec, ids, fake_indices(ids),
                                       fake_pooled(ids, 512))
        assert x.shape == (10, 518)

    def test_embedding_subset_ignores_indices(self):
        ids = [f"a{i:04d}" for i in range(8)]
        spec = ExperimentSpec(domain="crime", subset="embedding", source="simclr",
                              layer="L2", k=16, pooling="max", model="gbm")
        x, _, _ = assemble_features(spec, ids, fake_indices(ids),
                                    fake_pooled(ids, 16))
        assert x.shape == (8, 16)

    def test_demographic_six_columns_excludes_target(self):
        ids = [f"a{i:04d}" for i in range(5)]
        indices = fake_indices(ids)
        spec = ExperimentSpec(domain="health", subset="demographic", model="lasso")
        x, y, _ = assemble_features(spec, ids, indices, None)
        assert x.shape == (5, 6)
        target_col = INDEX_NAMES.index("health")
        for i, a in enumerate(sorted(ids)):
            assert y[i] == indices[a][target_col]
            assert target_col not in demographic_columns("health")

    def test_area_missing_from_pooled_dropped(self):
        ids = [f"a{i:04d}" for i in range(6)]
        pooled = fake_pooled(ids[:-1], 4)  # last area uncovered
        spec = ExperimentSpec(domain="income", subset="embedding", source="simclr",
                              layer="L1", k=4, pooling="mean", model="lasso")
        x, _, used = assemble_features(spec, ids, fake_indices(ids), pooled)
        assert len(used) == 5 and ids[-1] not in used


class TestImprovement:
    def test_demographic_row_zero(self):
        assert improvement_pct(11.9, 11.9) == 0.0

    def test_table_arithmetic(self):
        assert int(round(improvement_pct(11.9, 10.8))) == 9
        assert int(round(improvement_pct(11.2, 8.9))) == 21

    def test_recompute_matches_stored(self):
        row = ResultRow(spec=ExperimentSpec(domain="income", subset="combined",
                                            source="simclr", layer="L1", k=4,
                                            pooling="mean", model="lasso"),
                        val_rmse=5.0, test_rmse=4.0, improvement_pct=improvement_pct(5.0, 4.0))
        assert row.improvement_pct == improvement_pct(5.0, 4.0)


def small_grid_fixture(seed=0):
    areas = lattice_areas(50, group_size=5)
    plan = build_split(areas, "g00", "g01", seed=seed)
    ids = [a.id for a in areas]
    rng = np.random.default_rng(seed)
    k = 4
    pooled = {}
    indices = {}
    for a in ids:
        vec = rng.uniform(0, 5, size=k)
        pooled[a] = PooledFeatures(area_id=a, vector=vec, method="mean", tile_count=2)
        # indices linearly tied to the pooled vector so embeddings help
        base = vec @ np.arange(1.0, k + 1)
        indices[a] = base + rng.normal(size=7)
    return plan, indices, {("simclr", "L1", k, "mean"): pooled}


class TestRunGrid:
    def test_one_row_per_spec_and_reproducible(self):
        plan, indices, lookup = small_grid_fixture()
        specs = grid_specs(domains=["income"], subsets=["demographic", "combined"],
                           sources=["simclr"], layers=["L1"], ks=[4],
                           poolings=["mean"], models=["lasso"], seed=3)
        rows1 = run_grid(specs, plan, indices, lookup, n_rounds_max=50)
        rows2 = run_grid(specs, plan, indices, lookup, n_rounds_max=50)
        assert len(rows1) == len(specs) == 2
        for r1, r2 in zip(rows1, rows2):
            assert r1.test_rmse == r2.test_rmse
            assert r1.val_rmse == r2.val_rmse

    def test_improvements_paired_by_domain_and_model(self):
        plan, indices, lookup = small_grid_fixture()
        specs = grid_specs(domains=["income"], subsets=["demographic", "combined"],
                           sources=["simclr"], layers=["L1"], ks=[4],
                           poolings=["mean"], models=["lasso", "gbm"], seed=3)
        rows = run_grid(specs, plan, indices, lookup, n_rounds_max=50)
        demo = {(r.spec.model): r.test_rmse for r in rows
                if r.spec.subset == "demographic"}
        for r in rows:
            if r.spec.subset == "demographic":
                assert r.improvement_pct == 0.0
            else:
                assert r.improvement_pct == pytest.approx(
                    improvement_pct(demo[r.spec.model], r.test_rmse))

    def test_missing_pooled_table_marks_row_failed(self):
        plan, indices, lookup = small_grid_fixture()
        specs = [ExperimentSpec(domain="income", subset="embedding",
                                source="simclr", layer="L4", k=99,
                                pooling="mean", model="lasso")]
        rows = run_grid(specs, plan, indices, lookup)
        assert rows[0].failed

    def test_grid_cardinality(self):
        specs = grid_specs(domains=["income", "crime"],
                           subsets=["demographic", "embedding", "combined"],
                           sources=["simclr"], layers=["L1"], ks=[4, 8],
                           poolings=["mean", "max"], models=["lasso", "gbm"])
        # per domain/model: 1 demographic + 2 subsets x 1 source x 1 layer x 2 K x 2 pooling
        assert len(specs) == 2 * 2 * (1 + 2 * 2 * 2)
