"""Multi-scale cube generator: random crops at three side-length scales."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

from sar.errors import SamplingError
from sar.volume import Modality, Volume

SUBVOLUME_SHAPE = (64, 64, 32)
MIN_CROP_EXTENT = 4


class ScaleLabel(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2


SCALE_FRACTIONS = {
    ScaleLabel.SMALL: Fraction(1, 8),
    ScaleLabel.MEDIUM: Fraction(1, 4),
    ScaleLabel.LARGE: Fraction(1, 2),
}


def scale_label_of(fraction) -> ScaleLabel:
    frac = Fraction(fraction).limit_denominator(64)
    if abs(float(frac) - float(fraction)) > 1e-12:
        raise ValueError(f"unsupported crop fraction {fraction!r}")
    for label, f in SCALE_FRACTIONS.items():
        if frac == f:
            return label
    raise ValueError(f"unsupported crop fraction {fraction!r}; expected 1/2, 1/4 or 1/8")


@dataclass(frozen=True)
class SamplingPlan:
    """Per-volume crop counts. The default is the 2:1:1 small:medium:large mix."""

    n_small: int = 32
    n_medium: int = 16
    n_large: int = 16
    rng_seed: int = 0
    target_shape: tuple[int, int, int] = SUBVOLUME_SHAPE

    def __post_init__(self):
        if min(self.n_small, self.n_medium, self.n_large) < 0:
            raise ValueError("crop counts must be non-negative")
        if len(self.target_shape) != 3 or min(self.target_shape) < 2:
            raise ValueError(f"target_shape must be three dims >= 2, got {self.target_shape}")
        object.__setattr__(self, "target_shape", tuple(int(n) for n in self.target_shape))

    @property
    def counts(self) -> dict[ScaleLabel, int]:
        return {
            ScaleLabel.SMALL: self.n_small,
            ScaleLabel.MEDIUM: self.n_medium,
            ScaleLabel.LARGE: self.n_large,
        }

    @property
    def per_volume(self) -> int:
        return self.n_small + self.n_medium + self.n_large

    @property
    def has_default_ratio(self) -> bool:
        return self.n_small == self.n_medium + self.n_large and self.n_medium == self.n_large

    @classmethod
    def single_scale(cls, fraction, n: int, **kw) -> SamplingPlan:
        label = scale_label_of(fraction)
        counts = {"n_small": 0, "n_medium": 0, "n_large": 0}
        counts[f"n_{label.name.lower()}"] = n
        return cls(**counts, **kw)

    def totals(self, n_cases: int) -> tuple[int, int, int]:
        """Dataset-level (small, medium, large) counts for ``n_cases`` volumes."""
        return (self.n_small * n_cases, self.n_medium * n_cases, self.n_large * n_cases)


@dataclass(frozen=True, eq=False)
class SubVolume:
    data: np.ndarray
    scale_label: ScaleLabel
    modality_label: Modality
    source_id: str
    crop_origin: tuple[int, int, int]
    crop_extent: tuple[int, int, int]


def crop_extent(shape, fraction) -> tuple[int, int, int]:
    return tuple(max(1, int(math.floor(n * float(fraction) + 0.5))) for n in shape)


def resize_trilinear(cube: np.ndarray, target=SUBVOLUME_SHAPE) -> np.ndarray:
    """Corner-aligned trilinear resize (first and last voxels map onto each other)."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {cube.shape}")
    if min(cube.shape) < 2:
        raise ValueError(f"every axis needs >= 2 voxels to interpolate, got shape {cube.shape}")
    target = tuple(int(n) for n in target)
    if tuple(cube.shape) == target:
        return cube.astype(np.float64, copy=True)
    # Per-axis step (n_in - 1) / (n_out - 1); a single output voxel samples index 0.
    steps = [(n - 1) / (m - 1) if m > 1 else 0.0 for n, m in zip(cube.shape, target)]
    out = ndimage.affine_transform(
        np.asarray(cube, dtype=np.float64),
        np.diag(steps),
        output_shape=target,
        order=1,
        mode="nearest",
    )
    # Rounding in the coordinate map can push a sample a hair outside the hull.
    return np.clip(out, cube.min(), cube.max())


def generate_subvolumes(vol: Volume, plan: SamplingPlan, rng: np.random.Generator) -> list[SubVolume]:
    """Crop ``plan.per_volume`` random sub-volumes from ``vol`` and resize them.

    Crops are emitted small first, then medium, then large.
    """
    extents = {}
    for label, count in plan.counts.items():
        if count == 0:
            continue
        ext = crop_extent(vol.shape, SCALE_FRACTIONS[label])
        for axis, (e, n) in enumerate(zip(ext, vol.shape)):
            if e < MIN_CROP_EXTENT:
                raise SamplingError(
                    f"{vol.source_id or 'volume'}: axis {axis} ({n} voxels) gives a "
                    f"{SCALE_FRACTIONS[label]} crop of {e} voxels, need >= {MIN_CROP_EXTENT}"
                )
        extents[label] = ext

    out = []
    for label, count in plan.counts.items():
        if count == 0:
            continue
        ext = extents[label]
        for _ in range(count):
            origin = tuple(int(rng.integers(0, n - e + 1)) for n, e in zip(vol.shape, ext))
            sl = tuple(slice(o, o + e) for o, e in zip(origin, ext))
            data = resize_trilinear(vol.data[sl], plan.target_shape).astype(np.float32)
            out.append(SubVolume(data, label, vol.modality, vol.source_id, origin, ext))
    return out
