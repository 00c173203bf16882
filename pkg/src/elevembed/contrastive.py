"""NT-Xent loss and the contrastive pretraining loop.

Projection vectors arrive paired: rows (2k, 2k+1) are the two augmented
views of one tile. The loss attracts each pair and repels everything else
in the batch; negatives are in-batch only. Training consumes tiles that
were area-mean downsampled to the encoder input once up front, augments
per epoch from streams derived as (seed, epoch, tile_id), and applies
Adam after every batch, so a run is a pure function of its seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .augment import AugmentSpec, augment_array, derive_rng
from .encoder import EncoderModel, ForwardCache, backward, forward, tiles_to_batch
from .errors import ConfigError, DegenerateInputError
from .raster import TileSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    batch_pairs: int = 64          # N tiles -> 2N views per batch
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_pairs < 2:
            raise ConfigError("batch_pairs must be >= 2 (need a negative)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass(frozen=True)
class PairBatch:
    """2N projection vectors in paired order plus their source tile ids."""

    z: np.ndarray
    tile_ids: tuple[int, ...]

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[0] % 2 != 0:
            raise ConfigError("pair batch must be a (2N, d) matrix")
        if not np.all(np.isfinite(self.z)):
            raise DegenerateInputError("pair batch contains non-finite values")


def nt_xent(z: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Normalized temperature-scaled cross entropy over a paired batch.

    Returns (loss, dloss/dz). Each of the 2N rows acts once as the anchor
    of its partner; the softmax over the other 2N-1 rows is stabilized by
    max subtraction. Exact gradients via the cosine-similarity Jacobian.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if z.ndim != 2 or m % 2 != 0 or m < 2:
        raise ConfigError("nt_xent needs a (2N, d) matrix with N >= 1")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm projection vector")

    u = z / norms[:, None]
    sim = u @ u.T
    logits = sim / temperature
    np.fill_diagonal(logits, -np.inf)

    pos = np.arange(m) ^ 1  # partner of each anchor
    row_max = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - row_max)
    denom = exp.sum(axis=1)
    log_denom = np.log(denom) + row_max[:, 0]
    losses = log_denom - logits[np.arange(m), pos]
    loss = float(losses.mean())

    # d(loss)/d(logits): softmax minus the positive indicator, averaged
    p = exp / denom[:, None]
    p[np.arange(m), pos] -= 1.0
    g_sim = p / (m * temperature)
    np.fill_diagonal(g_sim, 0.0)

    g_u = (g_sim + g_sim.T) @ u
    g_z = (g_u - (g_u * u).sum(axis=1, keepdims=True) * u) / norms[:, None]
    return loss, g_z


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Per-parameter Adam state; a single exclusive update per step."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= (self.lr * (self.m[k] / b1c)
                          / (np.sqrt(self.v[k] / b2c) + self.eps)).astype(params[k].dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train_simclr(tiles: TileSet, model: EncoderModel, spec: AugmentSpec,
                 cfg: ContrastiveConfig) -> tuple[EncoderModel, list[float]]:
    """Unsupervised pretraining on augmented view pairs.

    Per epoch the tiles are shuffled (seeded), cut into consecutive
    batches of `batch_pairs` tiles (a short trailing batch is dropped),
    augmented into view pairs, pushed to the projection tap and updated
    with Adam under NT-Xent. Returns a trained copy of the model and the
    mean loss per epoch; the input model is left untouched.
    """
    cfg.validate()
    spec.validate()
    model = model.copy()
    if cfg.epochs == 0:
        return model, []

    side = model.config.input_side
    base = tiles_to_batch(tiles, side)
    ids = tiles.ids
    # zero-relief tiles yield zero projections through the zero-bias ReLU
    # stack and carry no contrastive signal; keep them out of the batches
    # (they still receive embeddings at extraction time)
    relief = base.max(axis=(1, 2)) - base.min(axis=(1, 2))
    usable = relief > 0
    if usable.sum() < len(tiles):
        logger.info("excluding %d flat tiles from contrastive batches",
                    int(len(tiles) - usable.sum()))
    base, ids = base[usable], ids[usable]
    n = len(ids)
    if n < 2 * cfg.batch_pairs:
        raise ConfigError(
            f"need at least {2 * cfg.batch_pairs} usable tiles, have {n}")
    opt = Adam(model.params, cfg.learning_rate, cfg.adam_beta1,
               cfg.adam_beta2, cfg.adam_eps)
    trace: list[float] = []

    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, epoch).permutation(n)
        batch_losses = []
        for b in range(n // cfg.batch_pairs):
            sel = order[b * cfg.batch_pairs:(b + 1) * cfg.batch_pairs]
            views = np.empty((2 * len(sel), side, side), dtype=np.float32)
            for row, idx in enumerate(sel):
                rng = derive_rng(cfg.seed, epoch, int(ids[idx]))
                for half in (0, 1):
                    v = augment_array(base[idx], spec, rng)
                    if v.max() == v.min():
                        # a crop landed on empty ground; the raw tile is the
                        # identity draw of the same augmentation family
                        v = base[idx]
                    views[2 * row + half] = v
            cache = ForwardCache(batch_shape=views.shape)
            proj = forward(model, views, "projection", cache=cache)
            loss, g_z = nt_xent(proj, cfg.temperature)
            if not np.isfinite(loss):
                raise DegenerateInputError(
                    f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(model, cache, g_z)
            opt.step(model.params, grads)
            batch_losses.append(loss)
        trace.append(float(np.mean(batch_losses)))
        logger.info("epoch %d: mean NT-Xent loss %.5f", epoch, trace[-1])
    return model, trace


def extract_representations(model: EncoderModel, tiles: TileSet,
                            tap: str = "L1",
                            batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Un-augmented representations, rows ordered by tile id.

    Returns (ids, matrix). The projection tap is allowed but the head
    layers are the intended embedding source, so it is flagged in logs.
    """
    if tap == "projection":
        logger.warning("extracting the projection tap; the pre-projection "
                       "head layers are the recommended embedding source")
    order = np.argsort(tiles.ids, kind="stable")
    base = tiles_to_batch(tiles, model.config.input_side)[order]
    ids = tiles.ids[order].astype(np.int64)
    chunks = [forward(model, base[i:i + batch_size], tap)
              for i in range(0, len(ids), batch_size)]
    return ids, np.concatenate(chunks, axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# CSV emission (interchangeable with the external-feature import format)
# ---------------------------------------------------------------------------


def write_representations_csv(ids: np.ndarray, matrix: np.ndarray, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("tile_id," + ",".join(f"f{k}" for k in range(matrix.shape[1])) + "\n")
        for tid, row in zip(ids, matrix):
            fh.write(str(int(tid)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def write_loss_trace(trace: list[float], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,mean_loss\n")
        for e, v in enumerate(trace):
            fh.write(f"{e},{v!r}\n")
