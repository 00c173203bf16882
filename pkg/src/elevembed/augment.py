"""Stochastic tile augmentations for contrastive view pairs.

One `augment` call always consumes exactly ten draws from the stream, in
this order: crop scale, row offset, col offset, horizontal-flip uniform,
vertical-flip uniform, gain, gamma, offset, blur uniform, blur sigma.
Drawing unconditionally keeps a pair reproducible from its stream no
matter which transforms fire.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .raster import Tile


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent stream for a key tuple, e.g. (seed, epoch, tile_id)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class AugmentSpec:
    """Ranges for the three augmentation families: zoom/crop, flips, and
    value distortion plus blur (the single-channel reading of photographic
    colour jitter)."""

    scale_min: float = 0.6
    scale_max: float = 1.0
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    gain_range: tuple[float, float] = (0.8, 1.2)
    gamma_range: tuple[float, float] = (0.8, 1.25)
    offset_range: tuple[float, float] = (-0.5, 0.5)
    sigma_range: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 0.5

    def validate(self) -> None:
        if not (0.0 < self.scale_min <= self.scale_max <= 1.0):
            raise ConfigError("need 0 < scale_min <= scale_max <= 1")
        for p, name in ((self.flip_h_prob, "flip_h_prob"),
                        (self.flip_v_prob, "flip_v_prob"),
                        (self.blur_prob, "blur_prob")):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.gain_range[0] <= 0 or self.gain_range[0] > self.gain_range[1]:
            raise ConfigError("gain_range must be positive and ordered")
        if self.gamma_range[0] <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ConfigError("gamma_range must be positive and ordered")
        if self.offset_range[0] > self.offset_range[1]:
            raise ConfigError("offset_range must be ordered")
        if self.sigma_range[0] < 0 or self.sigma_range[0] > self.sigma_range[1]:
            raise ConfigError("sigma_range must be non-negative and ordered")


IDENTITY_SPEC = AugmentSpec(scale_min=1.0, scale_max=1.0, flip_h_prob=0.0,
                            flip_v_prob=0.0, gain_range=(1.0, 1.0),
                            gamma_range=(1.0, 1.0), offset_range=(0.0, 0.0),
                            sigma_range=(0.0, 0.0), blur_prob=0.0)


def augment_array(img: np.ndarray, spec: AugmentSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """Augmented copy of a side x side array; shape is preserved."""
    spec.validate()
    side = img.shape[0]
    if img.shape != (side, side) or side < 8:
        raise ConfigError("augment expects a square array with side >= 8")

    scale = float(rng.uniform(spec.scale_min, spec.scale_max))
    crop = math.ceil(scale * side)
    off_r = int(rng.integers(0, side - crop + 1))
    off_c = int(rng.integers(0, side - crop + 1))
    u_h = float(rng.random())
    u_v = float(rng.random())
    gain = float(rng.uniform(*spec.gain_range))
    gamma = float(rng.uniform(*spec.gamma_range))
    offset = float(rng.uniform(*spec.offset_range))
    u_blur = float(rng.random())
    sigma = float(rng.uniform(*spec.sigma_range))

    out = img.astype(np.float64)
    if crop != side or off_r or off_c:
        out = bilinear_resize(out[off_r:off_r + crop, off_c:off_c + crop], side)
    if u_h < spec.flip_h_prob:
        out = out[:, ::-1]
    if u_v < spec.flip_v_prob:
        out = out[::-1, :]
    out = value_distort(out, gain, gamma, offset)
    if u_blur < spec.blur_prob and sigma > 0:
        out = gaussian_blur(out, sigma)
    return np.ascontiguousarray(out, dtype=img.dtype)


def augment(tile: Tile, spec: AugmentSpec, rng: np.random.Generator) -> Tile:
    """Augmented view of a tile; id and centroid are preserved."""
    return Tile(id=tile.id, side=tile.side,
                elevations=augment_array(tile.elevations, spec, rng),
                centroid_x=tile.centroid_x, centroid_y=tile.centroid_y)


def make_pair(tile: Tile, spec: AugmentSpec,
              rng: np.random.Generator) -> tuple[Tile, Tile]:
    """Two independent augmented views; the first view's ten draws precede
    the second's on the stream."""
    return augment(tile, spec, rng), augment(tile, spec, rng)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def value_distort(img: np.ndarray, gain: float, gamma: float,
                  offset: float) -> np.ndarray:
    """v -> gain * v^gamma + offset on heights clamped below at 0."""
    v = np.clip(img, 0.0, None)
    return np.clip(gain * np.power(v, gamma) + offset, 0.0, None)


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation weights, half-pixel centres."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def bilinear_resize(img: np.ndarray, out_side: int) -> np.ndarray:
    m = _resize_matrix(img.shape[0], out_side)
    return m @ img @ _resize_matrix(img.shape[1], out_side).T


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, radius ceil(3*sigma), reflected borders.

    The radius is capped at side-1 so reflection stays well defined on
    small tiles; the kernel is renormalized to sum to 1 either way.
    """
    side = img.shape[0]
    radius = min(math.ceil(3.0 * sigma), side - 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    kernel /= kernel.sum()
    padded = np.pad(img, radius, mode="reflect")
    # rows then columns via windowed views
    tmp = sliding_window_view(padded, kernel.size, axis=1) @ kernel
    out = sliding_window_view(tmp, kernel.size, axis=0) @ kernel
    return out
