"""Convolutional tile encoder with exact reverse-mode gradients.

Architecture: strided zero-padded conv stages with ReLU, spatial global
average pooling into the backbone vector, four dense+ReLU head layers
(taps L1..L4), and a linear projection. Everything is plain numpy so the
gradients are auditable against finite differences.

The default desk-scale configuration (4 stages of 16/32/64/128 channels,
3x3 kernels, stride 2, 64-cell input) trains in minutes on a CPU; the
1280-feature wide variant used with externally computed vectors remains
expressible through `backbone_dim` of the imported matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrayfile import read_named_arrays, write_named_arrays
from .errors import (ConfigError, DimensionError, FormatError, ParseError,
                     StateError)
from .raster import TileSet, area_mean_resize

WEIGHT_MAGIC = b"DREM"

TAPS = ("backbone", "L1", "L2", "L3", "L4", "projection")


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class EncoderConfig:
    input_side: int = 64
    conv_stages: tuple[ConvStage, ...] = (
        ConvStage(16), ConvStage(32), ConvStage(64), ConvStage(128))
    head_dims: tuple[int, int, int, int] = (512, 512, 512, 512)
    projection_dim: int = 64

    def __post_init__(self):
        if self.input_side < 8:
            raise ConfigError("input_side must be >= 8")
        if not self.conv_stages:
            raise ConfigError("need at least one conv stage")
        for s in self.conv_stages:
            if s.kernel % 2 != 1:
                raise ConfigError(f"kernel {s.kernel} must be odd")
            if s.stride not in (1, 2):
                raise ConfigError("stride must preserve or halve the extent (1 or 2)")
            if s.out_channels < 1:
                raise ConfigError("out_channels must be >= 1")
        if len(self.head_dims) != 4:
            raise ConfigError("head must have exactly 4 hidden layers")
        if self.projection_dim < 1:
            raise ConfigError("projection_dim must be >= 1")

    @property
    def backbone_dim(self) -> int:
        return self.conv_stages[-1].out_channels

    def tap_dim(self, tap: str) -> int:
        if tap == "backbone":
            return self.backbone_dim
        if tap in ("L1", "L2", "L3", "L4"):
            return self.head_dims[int(tap[1]) - 1]
        if tap == "projection":
            return self.projection_dim
        raise ConfigError(f"unknown tap {tap!r}")

    def stage_sides(self) -> list[int]:
        """Spatial extent after each stage (zero padding kernel//2)."""
        sides = []
        side = self.input_side
        for s in self.conv_stages:
            p = s.kernel // 2
            side = (side + 2 * p - s.kernel) // s.stride + 1
            if side < 1:
                raise ConfigError("conv stages shrink the input to nothing")
            sides.append(side)
        return sides


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]  # insertion order == serialization order
    seed: int

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config,
                            {k: v.copy() for k, v in self.params.items()},
                            self.seed)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    in_c = 1
    for i, s in enumerate(config.conv_stages):
        shapes[f"conv{i}/weight"] = (s.out_channels, in_c, s.kernel, s.kernel)
        shapes[f"conv{i}/bias"] = (s.out_channels,)
        in_c = s.out_channels
    in_dim = config.backbone_dim
    for j, out_dim in enumerate(config.head_dims, start=1):
        shapes[f"dense{j}/weight"] = (in_dim, out_dim)
        shapes[f"dense{j}/bias"] = (out_dim,)
        in_dim = out_dim
    shapes["projection/weight"] = (in_dim, config.projection_dim)
    shapes["projection/bias"] = (config.projection_dim,)
    return shapes


def init_encoder(config: EncoderConfig, seed: int,
                 dtype=np.float32) -> EncoderModel:
    """He-uniform weights, zero biases, deterministic under seed."""
    config.stage_sides()  # validates shape propagation
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("/bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if "conv" in name else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return EncoderModel(config=config, params=params, seed=int(seed))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, int]:
    """(B*oh*ow, C*k*k) patch matrix with zero padding kernel//2."""
    b, c, h, w = x.shape
    p = kernel // 2
    oh = (h + 2 * p - kernel) // stride + 1
    ow = (w + 2 * p - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((b, oh, ow, c, kernel, kernel), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + oh * stride:stride,
                                        j:j + ow * stride:stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * oh * ow, c * kernel * kernel), oh


def _col2im(dcols: np.ndarray, x_shape, kernel: int, stride: int,
            oh: int) -> np.ndarray:
    b, c, h, w = x_shape
    p = kernel // 2
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    dcols = dcols.reshape(b, oh, oh, c, kernel, kernel)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + oh * stride:stride, j:j + oh * stride:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w]


@dataclass
class ForwardCache:
    batch_shape: tuple
    stage_inputs: list = field(default_factory=list)   # x going into each conv
    stage_cols: list = field(default_factory=list)     # im2col matrices
    stage_out: list = field(default_factory=list)      # post-ReLU maps
    pooled: np.ndarray | None = None
    head_in: list = field(default_factory=list)        # input to each dense
    head_out: list = field(default_factory=list)       # post-ReLU activations


def _check_batch(model: EncoderModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] != batch.shape[2]:
        raise DimensionError("batch must be (n, side, side)")
    if batch.shape[1] != model.config.input_side:
        raise DimensionError(
            f"tile side {batch.shape[1]} != input_side {model.config.input_side}")
    if batch.shape[0] < 1:
        raise DimensionError("batch must hold at least one tile")
    return batch.astype(model.dtype, copy=False)


def forward(model: EncoderModel, batch: np.ndarray, tap: str = "backbone",
            cache: ForwardCache | None = None) -> np.ndarray:
    """Representations at `tap` for a (n, side, side) batch.

    Pass a ForwardCache to retain the activations needed by `backward`
    (only meaningful with tap="projection").
    """
    if tap not in TAPS:
        raise ConfigError(f"unknown tap {tap!r}; expected one of {TAPS}")
    batch = _check_batch(model, batch)
    x = batch[:, None, :, :]  # single input channel
    cfg = model.config
    if cache is not None:
        cache.batch_shape = batch.shape

    for i, s in enumerate(cfg.conv_stages):
        w = model.params[f"conv{i}/weight"]
        bias = model.params[f"conv{i}/bias"]
        cols, oh = _im2col(x, s.kernel, s.stride)
        z = cols @ w.reshape(s.out_channels, -1).T + bias
        z = z.reshape(x.shape[0], oh, oh, s.out_channels).transpose(0, 3, 1, 2)
        out = np.maximum(z, 0.0)
        if cache is not None:
            cache.stage_inputs.append(x)
            cache.stage_cols.append(cols)
            cache.stage_out.append(out)
        x = out

    pooled = x.mean(axis=(2, 3))
    if cache is not None:
        cache.pooled = pooled
    if tap == "backbone":
        return pooled

    h = pooled
    for j in range(1, 5):
        w = model.params[f"dense{j}/weight"]
        bias = model.params[f"dense{j}/bias"]
        if cache is not None:
            cache.head_in.append(h)
        h = np.maximum(h @ w + bias, 0.0)
        if cache is not None:
            cache.head_out.append(h)
        if tap == f"L{j}":
            return h

    proj = h @ model.params["projection/weight"] + model.params["projection/bias"]
    return proj


def backward(model: EncoderModel, cache: ForwardCache,
             grad_projection: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of sum(grad_projection * projection) for every
    parameter; requires the cache of a tap="projection" forward pass."""
    cfg = model.config
    if cache.pooled is None or len(cache.head_out) != 4:
        raise StateError("backward needs the cache of a full projection forward pass")
    if grad_projection.shape != (cache.batch_shape[0], cfg.projection_dim):
        raise DimensionError("upstream gradient shape mismatch")

    grads: dict[str, np.ndarray] = {}
    g = grad_projection.astype(model.dtype, copy=False)

    grads["projection/weight"] = cache.head_out[-1].T @ g
    grads["projection/bias"] = g.sum(axis=0)
    g = g @ model.params["projection/weight"].T

    for j in range(4, 0, -1):
        g = g * (cache.head_out[j - 1] > 0)
        grads[f"dense{j}/weight"] = cache.head_in[j - 1].T @ g
        grads[f"dense{j}/bias"] = g.sum(axis=0)
        g = g @ model.params[f"dense{j}/weight"].T

    last = cache.stage_out[-1]
    b, c, oh, ow = last.shape
    g_map = np.broadcast_to(g[:, :, None, None] / (oh * ow), last.shape)

    for i in range(len(cfg.conv_stages) - 1, -1, -1):
        s = cfg.conv_stages[i]
        out = cache.stage_out[i]
        g_map = g_map * (out > 0)
        dz = g_map.transpose(0, 2, 3, 1).reshape(-1, s.out_channels)
        grads[f"conv{i}/weight"] = (dz.T @ cache.stage_cols[i]).reshape(
            model.params[f"conv{i}/weight"].shape)
        grads[f"conv{i}/bias"] = dz.sum(axis=0)
        if i > 0:
            dcols = dz @ model.params[f"conv{i}/weight"].reshape(s.out_channels, -1)
            g_map = _col2im(dcols, cache.stage_inputs[i].shape, s.kernel,
                            s.stride, out.shape[2])
    return {name: grads[name] for name in model.params}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _meta_vector(model: EncoderModel) -> np.ndarray:
    cfg = model.config
    vals = [cfg.input_side, len(cfg.conv_stages)]
    for s in cfg.conv_stages:
        vals += [s.out_channels, s.kernel, s.stride]
    vals += list(cfg.head_dims) + [cfg.projection_dim]
    vals += [model.seed // 2 ** 24, model.seed % 2 ** 24]  # exact below 2^48
    return np.array(vals, dtype=np.float32)


def _config_from_meta(meta: np.ndarray) -> tuple[EncoderConfig, int]:
    vals = [int(v) for v in meta]
    input_side, n_stages = vals[0], vals[1]
    pos = 2
    stages = []
    for _ in range(n_stages):
        stages.append(ConvStage(*vals[pos:pos + 3]))
        pos += 3
    head = tuple(vals[pos:pos + 4])
    proj = vals[pos + 4]
    seed = vals[pos + 5] * 2 ** 24 + vals[pos + 6]
    return EncoderConfig(input_side=input_side, conv_stages=tuple(stages),
                         head_dims=head, projection_dim=proj), seed


def save_weights(model: EncoderModel, path) -> None:
    arrays = {"meta": _meta_vector(model)}
    arrays.update(model.params)
    write_named_arrays(path, WEIGHT_MAGIC, arrays)


def load_weights(path) -> EncoderModel:
    arrays = read_named_arrays(path, WEIGHT_MAGIC)
    if "meta" not in arrays:
        raise FormatError("weight file is missing the meta record")
    try:
        config, seed = _config_from_meta(arrays.pop("meta"))
    except (IndexError, ConfigError) as exc:
        raise FormatError(f"corrupt meta record: {exc}")
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        raise FormatError("weight file layer names do not match the configuration")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FormatError(
                f"shape table mismatch for {name}: {arrays[name].shape} != {shape}")
    return EncoderModel(config=config,
                        params={n: arrays[n] for n in expected}, seed=seed)


# ---------------------------------------------------------------------------
# Tile batches and external feature import
# ---------------------------------------------------------------------------


def tiles_to_batch(tiles: TileSet, input_side: int) -> np.ndarray:
    """Stack tile elevations, area-mean downsampled to the encoder input."""
    if tiles.side == input_side:
        return tiles.elevations.astype(np.float32)
    out = np.empty((len(tiles), input_side, input_side), dtype=np.float32)
    for i in range(len(tiles)):
        out[i] = area_mean_resize(tiles.elevations[i], input_side)
    return out


def import_external_features(path, tile_ids=None) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Read a `tile_id,f0,...,f{d-1}` CSV of externally computed vectors.

    Returns (ids, matrix, missing) with rows sorted by tile id; `missing`
    lists ids from `tile_ids` that the file does not cover.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if len(header) < 2 or header[0] != "tile_id":
            raise ParseError("external feature CSV must start with a tile_id column")
        for k, name in enumerate(header[1:]):
            if name != f"f{k}":
                raise ParseError(f"expected feature column f{k}, found {name!r}")
        width = len(header) - 1
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != width + 1:
                raise ParseError(
                    f"line {lineno}: expected {width + 1} fields, found {len(parts)}")
            try:
                tid = int(parts[0])
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}")
            ids.append(tid)
    if len(set(ids)) != len(ids):
        dupes = sorted({t for t in ids if ids.count(t) > 1})
        raise ParseError(f"duplicate tile_id values: {dupes[:5]}")
    order = np.argsort(np.array(ids, dtype=np.int64), kind="stable")
    ids_arr = np.array(ids, dtype=np.int64)[order]
    matrix = np.array(rows, dtype=np.float64)[order]
    missing = []
    if tile_ids is not None:
        have = set(ids)
        missing = sorted(int(t) for t in tile_ids if int(t) not in have)
    return ids_arr, matrix, missing
