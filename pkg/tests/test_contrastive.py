import numpy as np
import pytest

from elevembed.augment import AugmentSpec
from elevembed.contrastive import (
    Adam,
    ContrastiveConfig,
    PairBatch,
    extract_representations,
    nt_xent,
    train_simclr,
)
from elevembed.encoder import ConvStage, EncoderConfig, forward, init_encoder
from elevembed.errors import ConfigError, DegenerateInputError
from elevembed.raster import TileSet


def brute_force_loss(z, tau):
    """Direct per-anchor evaluation of the batch loss."""
    z = np.asarray(z, dtype=float)
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(z)):
        j = i ^ 1
        num = np.exp(u[i] @ u[j] / tau)
        den = sum(np.exp(u[i] @ u[k] / tau) for k in range(len(z)) if k != i)
        total += -np.log(num / den)
    return total / len(z)


class TestNTXent:
    def test_no_negatives_zero_loss(self):
        z = np.array([[1.0, 2.0], [0.5, -1.0]])
        loss, grad = nt_xent(z, temperature=0.7)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(grad, 0.0, atol=1e-12)

    def test_orthonormal_two_pair_example(self):
        # pairs on e1 and e2 at tau=1: every anchor term is -log(e/(e+2))
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        loss, _ = nt_xent(z, temperature=1.0)
        assert loss == pytest.approx(0.551444713932051, abs=1e-12)
        assert loss == pytest.approx(brute_force_loss(z, 1.0), abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(8, 5))
        l1, _ = nt_xent(z, 0.5)
        l2, _ = nt_xent(3.0 * z, 0.5)
        assert l1 == pytest.approx(l2, abs=1e-12)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            z = rng.normal(size=(6, 4))
            loss, _ = nt_xent(z, 0.3)
            assert loss == pytest.approx(brute_force_loss(z, 0.3), abs=1e-10)

    def test_pair_order_symmetry(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(8, 3))
        swapped = z.reshape(4, 2, 3)[:, ::-1, :].reshape(8, 3)
        assert nt_xent(z, 0.5)[0] == pytest.approx(nt_xent(swapped, 0.5)[0], abs=1e-12)

    def test_orthogonal_rotation_invariance(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(6, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert nt_xent(z, 0.5)[0] == pytest.approx(nt_xent(z @ q, 0.5)[0], abs=1e-10)

    def test_loss_monotone_in_negative_similarity(self):
        losses = []
        for theta in np.linspace(0.1, np.pi - 0.1, 12):
            v = np.array([np.cos(theta), np.sin(theta)])
            z = np.stack([[1.0, 0.0], [1.0, 0.0], v, v])
            losses.append(nt_xent(z, 0.5)[0])
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(8, 8))  # N=4, dim=8
        _, grad = nt_xent(z, 0.5)
        fd = np.zeros_like(z)
        h = 1e-6
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                zp, zm = z.copy(), z.copy()
                zp[i, j] += h
                zm[i, j] -= h
                fd[i, j] = (nt_xent(zp, 0.5)[0] - nt_xent(zm, 0.5)[0]) / (2 * h)
        rel = np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert rel < 1e-4

    def test_degenerate_inputs(self):
        with pytest.raises(DegenerateInputError):
            nt_xent(np.array([[0.0, 0.0], [1.0, 0.0]]), 0.5)
        with pytest.raises(ConfigError):
            nt_xent(np.ones((4, 2)), 0.0)
        with pytest.raises(ConfigError):
            nt_xent(np.ones((3, 2)), 0.5)

    def test_pair_batch_validation(self):
        with pytest.raises(ConfigError):
            PairBatch(z=np.ones((3, 2)), tile_ids=(1, 2, 3))
        with pytest.raises(DegenerateInputError):
            PairBatch(z=np.array([[np.nan, 1.0], [0.0, 1.0]]), tile_ids=(1, 1))


def test_adam_minimizes_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    opt = Adam(params, lr=0.1)
    for _ in range(500):
        opt.step(params, {"w": 2.0 * params["w"]})
    assert np.allclose(params["w"], 0.0, atol=1e-3)


SMALL_CFG = EncoderConfig(input_side=8,
                          conv_stages=(ConvStage(3, 3, 2), ConvStage(4, 3, 2)),
                          head_dims=(8, 8, 8, 8), projection_dim=4)


def structured_tiles(n=16, side=8, seed=0):
    rng = np.random.default_rng(seed)
    elev = np.zeros((n, side, side), dtype=np.float32)
    for i in range(n):
        if i % 2 == 0:  # blocky "buildings"
            elev[i, 2:6, 2:6] = rng.uniform(10, 20)
        else:           # low scatter
            elev[i] = rng.uniform(0, 1, size=(side, side))
    return TileSet(side, np.arange(n, dtype=np.uint64),
                   np.zeros((n, 2)), elev)


class TestTrainSimclr:
    def test_zero_epochs_is_noop(self):
        tiles = structured_tiles()
        model = init_encoder(SMALL_CFG, seed=5)
        trained, trace = train_simclr(tiles, model,
                                      AugmentSpec(), ContrastiveConfig(
                                          batch_pairs=4, epochs=0, seed=1))
        assert trace == []
        for name in model.params:
            assert np.array_equal(trained.params[name], model.params[name])

    def test_deterministic_trace(self):
        tiles = structured_tiles()
        cfg = ContrastiveConfig(batch_pairs=4, epochs=2, seed=3)
        model = init_encoder(SMALL_CFG, seed=5)
        _, t1 = train_simclr(tiles, model, AugmentSpec(), cfg)
        _, t2 = train_simclr(tiles, model, AugmentSpec(), cfg)
        assert t1 == t2
        assert len(t1) == 2 and all(np.isfinite(v) for v in t1)

    def test_input_model_untouched_and_weights_move(self):
        tiles = structured_tiles()
        model = init_encoder(SMALL_CFG, seed=5)
        before = {k: v.copy() for k, v in model.params.items()}
        trained, _ = train_simclr(tiles, model, AugmentSpec(),
                                  ContrastiveConfig(batch_pairs=4, epochs=1, seed=3))
        for name in before:
            assert np.array_equal(model.params[name], before[name])
        assert any(not np.array_equal(trained.params[k], before[k]) for k in before)

    def test_too_few_tiles(self):
        tiles = structured_tiles(n=4)
        model = init_encoder(SMALL_CFG, seed=5)
        with pytest.raises(ConfigError):
            train_simclr(tiles, model, AugmentSpec(),
                         ContrastiveConfig(batch_pairs=4, epochs=1))


class TestExtractRepresentations:
    def test_rows_ordered_by_id_and_tap_width(self):
        tiles = structured_tiles(n=6)
        shuffled = tiles.subset(np.array([4, 2, 0, 5, 1, 3]))
        model = init_encoder(SMALL_CFG, seed=5)
        ids, matrix = extract_representations(model, shuffled, tap="L1")
        assert ids.tolist() == [0, 1, 2, 3, 4, 5]
        assert matrix.shape == (6, 8)

    def test_duplicate_tile_rows_identical(self):
        tiles = structured_tiles(n=4)
        doubled = TileSet(tiles.side,
                          np.concatenate([tiles.ids, tiles.ids[:1]]),
                          np.concatenate([tiles.centroids, tiles.centroids[:1]]),
                          np.concatenate([tiles.elevations, tiles.elevations[:1]]))
        model = init_encoder(SMALL_CFG, seed=5)
        ids, matrix = extract_representations(model, doubled, tap="backbone")
        assert ids.tolist()[:2] == [0, 0]
        assert np.array_equal(matrix[0], matrix[1])

    def test_head_layer_width_matches_config(self):
        cfg = EncoderConfig(input_side=8,
                            conv_stages=(ConvStage(3, 3, 2),),
                            head_dims=(512, 512, 512, 512), projection_dim=16)
        model = init_encoder(cfg, seed=1)
        tiles = structured_tiles(n=2)
        _, matrix = extract_representations(model, tiles, tap="L1")
        assert matrix.shape[1] == 512
        _, backbone = extract_representations(model, tiles, tap="backbone")
        assert backbone.shape[1] == 3
