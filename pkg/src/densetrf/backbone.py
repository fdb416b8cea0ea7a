"""Frozen feature extraction.

The mock extractor turns every P x P patch into a vector of texture-sensitive
statistics and projects it with a fixed random matrix. Nothing here is ever
trained; downstream code treats the returned grids as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import formats

MOCK_PATCH = "mock_patch"
EXTERNAL_IMPORT = "external_import"

# (cycles per pixel, orientation in degrees) for the quadrature filter bank
FILTER_BANK = tuple((f, a) for f in (0.125, 0.25) for a in (0.0, 45.0, 90.0, 135.0))
N_STATS = 3 + 3 + 3 + len(FILTER_BANK)
# per-group gains so that texture statistics are not swamped by the colour means
STAT_GAINS = np.array([1.0] * 3 + [3.0] * 3 + [3.0] * 3 + [6.0] * len(FILTER_BANK))
# statistics unaffected by additive colour offsets (stds, gradients, filter energies)
TEXTURE_STATS = slice(3, N_STATS)


class DimensionMismatchError(ValueError):
    pass


class NonFiniteInputError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = MOCK_PATCH
    patch_size: int = 8
    out_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (MOCK_PATCH, EXTERNAL_IMPORT):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.out_channels < 4:
            raise ValueError("out_channels must be >= 4")


@dataclass
class FeatureMap:
    data: np.ndarray  # H x W x C_r
    patch_size: int
    source_image_shape: tuple[int, int]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def validate_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatchError(f"expected Hi x Wi x 3 image, got {image.shape}")
    hi, wi, _ = image.shape
    if hi == 0 or wi == 0 or hi % patch_size or wi % patch_size:
        raise DimensionMismatchError(
            f"image size {hi}x{wi} is not a positive multiple of patch size {patch_size}"
        )
    if not np.all(np.isfinite(image)):
        raise NonFiniteInputError("image contains NaN or Inf")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


@lru_cache(maxsize=8)
def _filter_bank(patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean even/odd gratings, each of shape (n_filters, P, P)."""
    yy, xx = np.mgrid[0:patch_size, 0:patch_size].astype(np.float64)
    even, odd = [], []
    for freq, angle in FILTER_BANK:
        theta = np.deg2rad(angle)
        phase = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
        for bank, kernel in ((even, np.cos(phase)), (odd, np.sin(phase))):
            kernel = kernel - kernel.mean()
            bank.append(kernel / patch_size**2)
    return np.stack(even), np.stack(odd)


@lru_cache(maxsize=8)
def _projection(seed: int, out_channels: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N_STATS, out_channels)) / np.sqrt(N_STATS)


def patch_statistics(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-patch statistics vector, shape (H, W, N_STATS).

    Layout: channel means (3), channel standard deviations (3), mean absolute
    within-patch gradient per channel (3), grayscale quadrature filter energy
    per bank entry. Indices 3: onward are unaffected by additive photometric
    offsets.
    """
    image = validate_image(image, patch_size)
    hi, wi, _ = image.shape
    p = patch_size
    patches = image.reshape(hi // p, p, wi // p, p, 3).transpose(0, 2, 1, 3, 4)
    means = patches.mean(axis=(2, 3))
    stds = patches.std(axis=(2, 3))
    dx = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3))
    dy = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3))
    grad = 0.5 * (dx + dy)
    gray = patches.mean(axis=4)
    even, odd = _filter_bank(p)
    e = np.einsum("hwij,fij->hwf", gray, even)
    o = np.einsum("hwij,fij->hwf", gray, odd)
    energy = np.sqrt(e**2 + o**2)
    return np.concatenate([means, stds, grad, energy], axis=-1)


def extract_features(image: np.ndarray, spec: ExtractorSpec = ExtractorSpec()) -> FeatureMap:
    if spec.kind != MOCK_PATCH:
        raise ValueError("only the mock_patch extractor runs in-process; "
                         "use import_precomputed_features for external features")
    stats = patch_statistics(image, spec.patch_size) * STAT_GAINS
    data = (stats @ _projection(spec.seed, spec.out_channels)).astype(np.float32)
    return FeatureMap(data=data, patch_size=spec.patch_size,
                      source_image_shape=(image.shape[0], image.shape[1]))


def extract_batch(images, spec: ExtractorSpec = ExtractorSpec()) -> np.ndarray:
    """Stack of feature grids, shape (N, H, W, C_r), float32."""
    return np.stack([extract_features(img, spec).data for img in images])


def export_features(path, fmap: FeatureMap) -> None:
    formats.write_grid(path, fmap.data, fmap.patch_size, formats.FEATURE_MAGIC)


def import_precomputed_features(path) -> FeatureMap:
    data, patch = formats.read_grid(path, formats.FEATURE_MAGIC)
    if not np.all(np.isfinite(data)):
        raise NonFiniteInputError(f"{path}: payload contains NaN or Inf")
    h, w, _ = data.shape
    return FeatureMap(data=data, patch_size=patch, source_image_shape=(h * patch, w * patch))
