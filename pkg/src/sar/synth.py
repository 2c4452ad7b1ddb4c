"""Deterministic two-modality synthetic corpora.

Pre-training volumes are smoothed Gaussian noise with a few soft structures;
CT and MRI differ only in mean, contrast and grain (the MRI grain is
longer along z). Segmentation cases add 1-3 textured ellipsoidal "tumors"
whose parameters are kept, so labels can be recomputed analytically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from sar.errors import DataError
from sar.volume import Modality, Volume, load_volume, save_raw


@dataclass(frozen=True)
class Texture:
    """Gaussian-smoothed noise with this mean and std; ``smoothing`` may be per axis."""

    mean: float
    std: float
    smoothing: float | tuple[float, float, float]


@dataclass(frozen=True)
class SynthSpec:
    n_ct: int = 4
    n_mri: int = 4
    dims: tuple[int, int, int] = (96, 96, 64)
    tumor_fraction_range: tuple[float, float] = (1 / 8, 1 / 2)
    # Equal in-plane grain keeps the scale cue modality-free; the MRI grain
    # is elongated along z, a cue that survives monotone intensity remaps.
    ct: Texture = field(default_factory=lambda: Texture(0.3, 0.1, 1.3))
    mri: Texture = field(default_factory=lambda: Texture(0.6, 0.15, (1.3, 1.3, 3.5)))
    # Segmentation background and lesion textures.
    tissue: Texture = field(default_factory=lambda: Texture(0.45, 0.1, 2.0))
    lesion: Texture = field(default_factory=lambda: Texture(0.62, 0.08, 0.7))
    structures_range: tuple[int, int] = (1, 3)
    blobs_range: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise DataError(f"dims {self.dims} too small: every axis needs >= 32 voxels")
        lo, hi = self.tumor_fraction_range
        if not 0 < lo <= hi:
            raise DataError(f"invalid tumor_fraction_range {self.tumor_fraction_range}")
        if min(self.n_ct, self.n_mri) < 0:
            raise DataError("case counts must be non-negative")


class Blob(NamedTuple):
    center: tuple[float, float, float]
    radii: tuple[float, float, float]


class SegCase(NamedTuple):
    volume: Volume
    labels: np.ndarray
    blobs: list[Blob]


def _case_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def smooth_noise(shape, texture: Texture, rng) -> np.ndarray:
    z = ndimage.gaussian_filter(rng.standard_normal(shape), texture.smoothing, mode="reflect")
    z = (z - z.mean()) / z.std()
    return texture.mean + texture.std * z


def ellipsoid_mask(shape, blob: Blob) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, blob.center, blob.radii))
    return r2 <= 1.0


def _soft_ellipsoid(shape, blob: Blob) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, blob.center, blob.radii))
    return np.exp(-2.0 * r2)


def random_blob(dims, fraction_range, rng) -> Blob:
    lo, hi = fraction_range
    diam = [rng.uniform(lo, hi) * n for n in dims]
    radii = tuple(d / 2 for d in diam)
    center = []
    for r, n in zip(radii, dims):
        if 2 * r > n - 1:
            raise DataError(f"blob diameter {2 * r:.1f} cannot fit in axis of {n} voxels")
        center.append(rng.uniform(r, n - 1 - r))
    return Blob(tuple(center), radii)


def make_pretrain_corpus(spec: SynthSpec) -> list[Volume]:
    """``n_ct`` CT volumes followed by ``n_mri`` MRI volumes, values in [0, 1]."""
    corpus = []
    for i in range(spec.n_ct + spec.n_mri):
        modality = Modality.CT if i < spec.n_ct else Modality.MRI
        texture = spec.ct if modality == Modality.CT else spec.mri
        rng = _case_rng(spec.seed, 0, i)
        data = smooth_noise(spec.dims, texture, rng)
        for _ in range(int(rng.integers(spec.structures_range[0], spec.structures_range[1] + 1))):
            blob = random_blob(spec.dims, spec.tumor_fraction_range, rng)
            data += rng.choice([-1.0, 1.0]) * 1.5 * texture.std * _soft_ellipsoid(spec.dims, blob)
        data = np.clip(data, 0.0, 1.0).astype(np.float32)
        source = f"{modality.name.lower()}_{i:03d}"
        corpus.append(Volume(data, (1.0, 1.0, 1.0), modality, source, normalized=True))
    return corpus


def make_segmentation_corpus(spec: SynthSpec, n_cases: int, n_classes: int = 2) -> list[SegCase]:
    """Labeled cases; ``n_classes=3`` adds an organ shell (1) around the tumors (2)."""
    if n_classes not in (2, 3):
        raise DataError(f"n_classes must be 2 or 3, got {n_classes}")
    cases = []
    for i in range(n_cases):
        rng = _case_rng(spec.seed, 1, i)
        data = smooth_noise(spec.dims, spec.tissue, rng)
        n_blobs = int(rng.integers(spec.blobs_range[0], spec.blobs_range[1] + 1))
        blobs = [random_blob(spec.dims, spec.tumor_fraction_range, rng) for _ in range(n_blobs)]
        tumor = np.zeros(spec.dims, dtype=bool)
        for blob in blobs:
            tumor |= ellipsoid_mask(spec.dims, blob)
        lesion = smooth_noise(spec.dims, spec.lesion, rng)
        labels = tumor.astype(np.uint8)
        if n_classes == 3:
            organ = np.zeros(spec.dims, dtype=bool)
            for blob in blobs:
                organ |= ellipsoid_mask(spec.dims, Blob(blob.center, tuple(1.5 * r for r in blob.radii)))
            organ &= ~tumor
            data = np.where(organ, data + 0.5 * (spec.lesion.mean - spec.tissue.mean), data)
            labels = np.where(tumor, 2, np.where(organ, 1, 0)).astype(np.uint8)
        data = np.where(tumor, lesion, data)
        data = np.clip(data, 0.0, 1.0).astype(np.float32)
        vol = Volume(data, (1.0, 1.0, 1.0), Modality.MRI, f"case_{i:03d}", normalized=True)
        cases.append(SegCase(vol, labels, blobs))
    return cases


def labels_from_blobs(shape, blobs, n_classes: int = 2) -> np.ndarray:
    tumor = np.zeros(shape, dtype=bool)
    for blob in blobs:
        tumor |= ellipsoid_mask(shape, blob)
    if n_classes == 2:
        return tumor.astype(np.uint8)
    organ = np.zeros(shape, dtype=bool)
    for blob in blobs:
        organ |= ellipsoid_mask(shape, Blob(blob.center, tuple(1.5 * r for r in blob.radii)))
    return np.where(tumor, 2, np.where(organ, 1, 0)).astype(np.uint8)


# --- on-disk corpora ------------------------------------------------------

MANIFEST = "manifest.jsonl"


def write_corpus(items, out_dir) -> Path:
    """Write volumes (and labels, for ``SegCase`` items) as raw files plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in items:
        vol = item.volume if isinstance(item, SegCase) else item
        path = save_raw(vol, out_dir / f"{vol.source_id}.sarv")
        entry = {"case_id": vol.source_id, "modality": vol.modality.name, "path": path.name}
        if isinstance(item, SegCase):
            lab = Volume(item.labels.astype(np.float32), vol.spacing, vol.modality, vol.source_id)
            lab_path = save_raw(lab, out_dir / f"{vol.source_id}_labels.sarv")
            entry["label_path"] = lab_path.name
            entry["blobs"] = [{"center": list(b.center), "radii": list(b.radii)} for b in item.blobs]
        lines.append(json.dumps(entry))
    manifest = out_dir / MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_corpus(corpus_dir):
    """Inverse of ``write_corpus``: a list of ``Volume`` or of ``SegCase``."""
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / MANIFEST
    if not manifest.is_file():
        raise DataError(f"{corpus_dir}: no {MANIFEST}")
    items = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            vol = load_volume(corpus_dir / entry["path"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{manifest}:{lineno}: bad manifest entry ({exc})") from exc
        if "label_path" in entry:
            labels = load_volume(corpus_dir / entry["label_path"]).data
            if labels.shape != vol.shape:
                raise DataError(f"{entry['case_id']}: labels {labels.shape} do not match volume {vol.shape}")
            blobs = [Blob(tuple(b["center"]), tuple(b["radii"])) for b in entry.get("blobs", [])]
            items.append(SegCase(vol, labels.astype(np.uint8), blobs))
        else:
            items.append(vol)
    return items
