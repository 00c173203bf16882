import numpy as np
import pytest

from elevembed.errors import ConfigError
from elevembed.synth import (
    INDEX_COUPLING,
    INDEX_NAMES,
    ArchetypeParams,
    default_archetypes,
    generate_scene,
    read_indices_csv,
    write_scene,
)


def tiny_scene(seed=7, noise_sd=0.0):
    return generate_scene(seed, areas_x=4, areas_y=2, area_side=32, noise_sd=noise_sd)


def test_same_seed_bit_identical():
    a, b = tiny_scene(), tiny_scene()
    assert np.array_equal(a.grid.values, b.grid.values)
    for aid in a.indices:
        assert np.array_equal(a.indices[aid], b.indices[aid])


def test_different_seed_differs():
    a, b = tiny_scene(seed=7), tiny_scene(seed=8)
    assert not np.array_equal(a.grid.values, b.grid.values)


def test_empty_archetype_renders_nothing():
    bare = ArchetypeParams("bare", 0, (0.0, 0.0), (1, 1), 0, (0.0, 0.0))
    scene = generate_scene(3, areas_x=2, areas_y=2, area_side=32, params=[bare])
    assert np.all(scene.grid.values == 0.0)


def test_noise_zero_indices_match_linear_form():
    scene = tiny_scene(noise_sd=0.0)
    for aid, vals in scene.indices.items():
        f = scene.factors[aid]
        for k, name in enumerate(INDEX_NAMES):
            assert vals[k] == pytest.approx(np.dot(INDEX_COUPLING[name], f), abs=1e-12)


def test_urban_mean_elevation_exceeds_rural():
    urban = ArchetypeParams("urban", 30, (10.0, 40.0), (8, 16), 0, (0.0, 0.0))
    rural = ArchetypeParams("rural", 0, (0.0, 0.0), (1, 1), 0, (0.0, 0.0))
    # alternate archetypes by seeding until both appear; 1x2 lattice keeps it small
    scene = generate_scene(5, areas_x=2, areas_y=1, area_side=64,
                           params=[urban, rural])
    means = {}
    for area in scene.areas:
        x0 = min(p[0] for p in area.polygon)
        block = scene.grid.values[:, int(x0):int(x0) + 64]
        means[scene.archetype_map[area.id]] = block.mean()
    if len(means) == 2:  # both archetypes drawn
        assert means["urban"] > means["rural"]


def test_rendered_heights_bounded():
    scene = tiny_scene()
    top = max(max(a.height_range[1], a.canopy_height_range[1])
              for a in default_archetypes())
    assert scene.grid.values.min() >= 0.0
    assert scene.grid.values.max() <= top


def test_coupling_recovered_by_regression():
    # with zero noise a least-squares fit on the factors is exact
    scene = generate_scene(11, areas_x=6, areas_y=6, area_side=32, noise_sd=0.0)
    F = np.stack([scene.factors[a.id] for a in scene.areas])
    assert np.linalg.matrix_rank(F) == 3
    for k, name in enumerate(INDEX_NAMES):
        y = np.array([scene.indices[a.id][k] for a in scene.areas])
        coef, *_ = np.linalg.lstsq(F, y, rcond=None)
        assert np.allclose(coef, INDEX_COUPLING[name], atol=1e-8)


def test_tile_side_divisibility_checked():
    with pytest.raises(ConfigError):
        generate_scene(1, 2, 2, area_side=100, tile_side=64)


def test_group_ids_contiguous_blocks():
    scene = generate_scene(2, areas_x=8, areas_y=2, area_side=32, group_cols=2)
    groups = {}
    for a in scene.areas:
        x0 = min(p[0] for p in a.polygon)
        groups.setdefault(a.group_id, []).append(x0 // 32)
    assert len(groups) == 4
    for cols in groups.values():
        assert max(cols) - min(cols) <= 1


def test_write_scene_roundtrip(tmp_path):
    from elevembed.raster import load_raster, normalize_elevation

    scene = tiny_scene()
    paths = write_scene(scene, tmp_path / "scene")
    surface = load_raster(paths["surface"])
    terrain = load_raster(paths["terrain"])
    normalized = normalize_elevation(surface, terrain)
    # surface is quantized to 1 mm after the sum, so the difference may be
    # off by the quantization step
    assert np.allclose(normalized.values, scene.grid.values, atol=2e-3)
    idx = read_indices_csv(paths["indices"])
    for aid in scene.indices:
        assert np.array_equal(idx[aid], scene.indices[aid])
