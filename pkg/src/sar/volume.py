"""Volume container, file I/O, spacing resampling and intensity normalization."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from sar.errors import DataError, FormatError

RAW_MAGIC = b"SARV"
RAW_VERSION = 1
RAW_SUFFIX = ".sarv"
_HEADER = struct.Struct("<4sIIII3fB")

# Odd-reflection margin added before spline fitting; the boundary transient
# of the cubic prefilter decays by (2 - sqrt(3)) per voxel.
_SPLINE_MARGIN = 16


class Modality(enum.IntEnum):
    CT = 0
    MRI = 1


@dataclass(frozen=True)
class ModalityWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window lo={self.lo} must be < hi={self.hi}")


WINDOWS = {
    Modality.CT: ModalityWindow(-1000.0, 1000.0),
    Modality.MRI: ModalityWindow(0.0, 4000.0),
}

PANCREAS_HU_RANGE = (-96.0, 215.0)
PANCREAS_MEAN = 77.99
PANCREAS_STD = 75.40


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar field indexed ``data[x, y, z]`` with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality
    source_id: str = ""
    # Set by clip_and_normalize; makes a second window pass a no-op.
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with all dims >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> Volume:
        return replace(self, data=data)


def _as_modality(modality) -> Modality:
    if isinstance(modality, str):
        try:
            return Modality[modality.upper()]
        except KeyError:
            raise ValueError(f"unknown modality {modality!r}") from None
    return Modality(modality)


def save_raw(vol: Volume, path) -> Path:
    path = Path(path)
    dx, dy, dz = vol.shape
    header = _HEADER.pack(RAW_MAGIC, RAW_VERSION, dx, dy, dz, *vol.spacing, int(vol.modality))
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    path.write_bytes(header + payload)
    return path


def _read_raw(path: Path):
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: header: file has {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, dx, dy, dz, sx, sy, sz, mod = _HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: magic: expected {RAW_MAGIC!r}, got {magic!r}")
    if version != RAW_VERSION:
        raise FormatError(f"{path}: version: expected {RAW_VERSION}, got {version}")
    if mod not in (0, 1):
        raise FormatError(f"{path}: modality: expected 0 or 1, got {mod}")
    if min(dx, dy, dz) < 1:
        raise FormatError(f"{path}: dims: all dims must be >= 1, got {(dx, dy, dz)}")
    payload = blob[_HEADER.size:]
    n_expected = dx * dy * dz
    if len(payload) != 4 * n_expected:
        raise FormatError(
            f"{path}: payload: header declares {dx}x{dy}x{dz} = {n_expected} scalars, "
            f"payload holds {len(payload) / 4:g}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape((dx, dy, dz), order="F").astype(np.float32)
    return data, (sx, sy, sz), Modality(mod)


def load_volume(path, modality=None, spacing=None) -> Volume:
    """Read a ``.sarv`` raw volume or a NIfTI file.

    Raw files carry spacing and modality in their header; explicit arguments
    override them. NIfTI files need ``modality``; spacing defaults to the
    header zooms.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    name = path.name.lower()
    if name.endswith(RAW_SUFFIX):
        data, hdr_spacing, hdr_modality = _read_raw(path)
    elif name.endswith(".nii") or name.endswith(".nii.gz"):
        import nibabel as nib

        try:
            img = nib.load(str(path))
            data = np.asarray(img.dataobj, dtype=np.float32)
        except Exception as exc:
            raise FormatError(f"{path}: unreadable NIfTI: {exc}") from exc
        if data.ndim != 3:
            raise FormatError(f"{path}: dims: expected a 3D image, got shape {data.shape}")
        hdr_spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        hdr_modality = None
    else:
        raise FormatError(f"{path}: unsupported format (expected {RAW_SUFFIX}, .nii or .nii.gz)")

    if modality is None:
        if hdr_modality is None:
            raise DataError(f"{path}: modality must be given for NIfTI input")
        modality = hdr_modality
    return Volume(
        data=data,
        spacing=tuple(spacing) if spacing is not None else hdr_spacing,
        modality=_as_modality(modality),
        source_id=path.name.split(".")[0],
    )


def save_nifti(vol: Volume, path) -> Path:
    import nibabel as nib

    affine = np.diag([*vol.spacing, 1.0])
    nib.save(nib.Nifti1Image(np.asarray(vol.data, dtype=np.float32), affine), str(path))
    return Path(path)


def _round_half_up(x: float) -> int:
    return max(1, int(math.floor(x + 0.5)))


def resampled_shape(shape, spacing, target) -> tuple[int, int, int]:
    return tuple(_round_half_up(n * s / t) for n, s, t in zip(shape, spacing, target))


def resample_to_spacing(vol: Volume, target=(1.0, 1.0, 1.0)) -> Volume:
    """Cubic-spline resampling onto a grid with spacing ``target``.

    Output voxel ``j`` sits at physical position ``j * target`` (voxel 0 is
    shared). The field is extended by odd reflection about the edge voxels,
    so linear ramps and constants are reproduced exactly up to the edges.
    """
    target = tuple(float(t) for t in target)
    if len(target) != 3 or any(not t > 0 for t in target):
        raise ValueError(f"target spacing must be three positive values, got {target}")
    if target == vol.spacing:
        return vol.with_data(vol.data.copy())

    out_shape = resampled_shape(vol.shape, vol.spacing, target)
    src = np.asarray(vol.data, dtype=np.float64)
    padded = np.pad(src, _SPLINE_MARGIN, mode="reflect", reflect_type="odd")
    ratios = np.diag([t / s for t, s in zip(target, vol.spacing)])
    out = ndimage.affine_transform(
        padded,
        ratios,
        offset=float(_SPLINE_MARGIN),
        output_shape=out_shape,
        order=3,
        mode="mirror",
    )
    return Volume(out, target, vol.modality, vol.source_id, vol.normalized)


def clip_and_normalize(vol: Volume) -> Volume:
    """Clip to the modality window and map it affinely onto [0, 1].

    Volumes already marked ``normalized`` come back as an unchanged copy.
    """
    if vol.normalized:
        return vol.with_data(np.array(vol.data, dtype=np.float64))
    win = WINDOWS[vol.modality]
    data = np.asarray(vol.data, dtype=np.float64)
    out = (np.clip(data, win.lo, win.hi) - win.lo) / (win.hi - win.lo)
    return replace(vol, data=out, normalized=True)


def normalize_brats(vol: Volume) -> Volume:
    """Z-score the non-zero region; background voxels stay exactly zero."""
    data = np.asarray(vol.data, dtype=np.float64)
    mask = data != 0
    if mask.sum() < 2:
        raise DataError(f"{vol.source_id or 'volume'}: need >= 2 non-zero voxels, got {int(mask.sum())}")
    values = data[mask]
    mean = values.mean()
    std = values.std()
    if not std > 0:
        raise DataError(f"{vol.source_id or 'volume'}: non-zero region has zero variance")
    out = np.zeros_like(data)
    out[mask] = (values - mean) / std
    return vol.with_data(out)


def normalize_pancreas(vol: Volume) -> Volume:
    if vol.modality != Modality.CT:
        raise ValueError("pancreas normalization expects a CT volume")
    lo, hi = PANCREAS_HU_RANGE
    data = np.asarray(vol.data, dtype=np.float64)
    return vol.with_data((np.clip(data, lo, hi) - PANCREAS_MEAN) / PANCREAS_STD)
