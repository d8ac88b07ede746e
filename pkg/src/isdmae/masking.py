"""Intensity-bin and spatial-patch corruption of preprocessed images.

Images are channel-first arrays, ``3×H×W`` or ``3×H×W×D``.  A masked
position has every channel set to zero.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .rng import derive_seed, stream

LUMINOSITY = (0.2989, 0.5870, 0.1140)


class MaskMode(str, Enum):
    DUAL = "dual"
    INTENSITY_ONLY = "intensity_only"
    SPATIAL_ONLY = "spatial_only"


@dataclass(frozen=True)
class IntensityMaskSpec:
    k_bins: int = 16
    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.k_bins < 1:
            raise ValueError(f"k_bins must be positive, got {self.k_bins}")
        if not 0 < self.ratio < 1:
            raise ValueError(f"intensity ratio must lie in (0, 1), got {self.ratio}")
        m = self.num_bins_masked
        if not 1 <= m <= self.k_bins:
            raise ValueError(f"round(K*ratio) = {m} outside [1, {self.k_bins}]")

    @property
    def num_bins_masked(self) -> int:
        # round half up; Python's round() is banker's rounding
        return int(math.floor(self.k_bins * self.ratio + 0.5))

    def with_seed(self, seed: int) -> "IntensityMaskSpec":
        return IntensityMaskSpec(self.k_bins, self.ratio, seed)


@dataclass(frozen=True)
class SpatialMaskSpec:
    patch: int = 4
    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError(f"patch must be positive, got {self.patch}")
        if not 0 < self.ratio < 1:
            raise ValueError(f"spatial ratio must lie in (0, 1), got {self.ratio}")

    def with_seed(self, seed: int) -> "SpatialMaskSpec":
        return SpatialMaskSpec(self.patch, self.ratio, seed)


@dataclass(frozen=True)
class MaskedPair:
    """Two corrupted views of one image.

    In dual mode ``intensity_view`` is bin-masked and ``spatial_view`` is
    patch-masked.  In the single-strategy ablations both slots hold views made
    by the same strategy from different sub-seeds; each ``*_selection`` holds
    the bin or patch indices that produced the view in that slot.
    """

    intensity_view: np.ndarray
    spatial_view: np.ndarray
    intensity_selection: frozenset
    spatial_selection: frozenset
    mode: MaskMode


def grayscale(img: np.ndarray) -> np.ndarray:
    """Jointly min-max normalize all channels, then apply luminosity weights."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] != 3:
        raise ShapeError(f"expected 3 channels first, got {img.shape}")
    lo, hi = img.min(), img.max()
    if not hi > lo:
        raise DegenerateInputError("constant image: min-max normalization divides by zero")
    norm = (img - lo) / (hi - lo)
    return LUMINOSITY[0] * norm[0] + LUMINOSITY[1] * norm[1] + LUMINOSITY[2] * norm[2]


def intensity_bins(gray: np.ndarray, k_bins: int) -> np.ndarray:
    """Bin index per pixel; bins are [i/K, (i+1)/K) except the last, which includes 1."""
    edges = np.arange(k_bins + 1, dtype=np.float64) / k_bins
    idx = np.searchsorted(edges, gray, side="right") - 1
    return np.clip(idx, 0, k_bins - 1)


def intensity_mask(img: np.ndarray, spec: IntensityMaskSpec) -> tuple[np.ndarray, frozenset]:
    """Zero every pixel whose grayscale value falls in one of the randomly drawn bins."""
    img = np.asarray(img)
    bins = intensity_bins(grayscale(img), spec.k_bins)
    chosen = stream(spec.seed, "intensity-bins").sample(spec.k_bins, spec.num_bins_masked)
    hit = np.isin(bins, chosen)
    out = img.copy()
    out[:, hit] = 0
    return out, frozenset(chosen)


def patch_grid(spatial_shape: tuple[int, ...], patch: int) -> tuple[int, ...]:
    for n in spatial_shape:
        if n % patch:
            raise ShapeError(f"extent {n} not divisible by patch size {patch}")
    return tuple(n // patch for n in spatial_shape)


def num_patches_masked(spatial_shape: tuple[int, ...], spec: SpatialMaskSpec) -> int:
    total = int(np.prod(patch_grid(spatial_shape, spec.patch)))
    return int(math.floor(total * spec.ratio))


def spatial_mask(img: np.ndarray, spec: SpatialMaskSpec) -> tuple[np.ndarray, frozenset]:
    """Zero a random subset of the non-overlapping P×P (or P×P×P) patches.

    Patch indices are row-major over the patch grid.
    """
    img = np.asarray(img)
    spatial = img.shape[1:]
    grid = patch_grid(spatial, spec.patch)
    total = int(np.prod(grid))
    chosen = stream(spec.seed, "spatial-patches").sample(total, int(math.floor(total * spec.ratio)))
    out = img.copy()
    p = spec.patch
    for flat in chosen:
        coords = np.unravel_index(flat, grid)
        sl = tuple(slice(c * p, (c + 1) * p) for c in coords)
        out[(slice(None),) + sl] = 0
    return out, frozenset(chosen)


def make_masked_pair(img: np.ndarray, i_spec: IntensityMaskSpec, s_spec: SpatialMaskSpec,
                     mode: MaskMode | str = MaskMode.DUAL) -> MaskedPair:
    mode = MaskMode(mode)
    if mode is MaskMode.DUAL:
        t_view, t_sel = intensity_mask(img, i_spec.with_seed(derive_seed(i_spec.seed, "branch-t")))
        p_view, p_sel = spatial_mask(img, s_spec.with_seed(derive_seed(s_spec.seed, "branch-p")))
    elif mode is MaskMode.INTENSITY_ONLY:
        t_view, t_sel = intensity_mask(img, i_spec.with_seed(derive_seed(i_spec.seed, "branch-t")))
        p_view, p_sel = intensity_mask(img, i_spec.with_seed(derive_seed(i_spec.seed, "branch-t2")))
    else:
        t_view, t_sel = spatial_mask(img, s_spec.with_seed(derive_seed(s_spec.seed, "branch-p2")))
        p_view, p_sel = spatial_mask(img, s_spec.with_seed(derive_seed(s_spec.seed, "branch-p")))
    return MaskedPair(t_view, p_view, t_sel, p_sel, mode)


def mask_stats(masked: np.ndarray, original: np.ndarray) -> dict:
    """Fraction of originally nonzero positions that were zeroed, plus a histogram
    of run lengths of zeroed positions along the last axis."""
    masked = np.asarray(masked)
    original = np.asarray(original)
    if masked.shape != original.shape:
        raise ShapeError(f"shape mismatch {masked.shape} vs {original.shape}")
    was_nonzero = np.any(original != 0, axis=0)
    now_zero = np.all(masked == 0, axis=0)
    denom = int(was_nonzero.sum())
    zeroed = int((was_nonzero & now_zero).sum())
    runs: Counter = Counter()
    rows = now_zero.reshape(-1, now_zero.shape[-1])
    for row in rows:
        run = 0
        for v in row:
            if v:
                run += 1
            elif run:
                runs[run] += 1
                run = 0
        if run:
            runs[run] += 1
    return {
        "masked_fraction": zeroed / denom if denom else 0.0,
        "zero_run_histogram": dict(sorted(runs.items())),
    }

