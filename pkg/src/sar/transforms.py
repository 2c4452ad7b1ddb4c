"""Restoration corruptions: intensity curve, local shuffle, inner/outer painting.

Each transform draws its parameters from the caller's generator and keeps
them, together with a child seed for the voxel-level randomness, in a
``CorruptionRecord``. ``replay`` rebuilds the corrupted array from the
original and the record alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SEED_BOUND = 2**63
_DOMAIN_TOL = 1e-6


class DomainError(ValueError):
    """Transform input lies outside [0, 1]."""


@dataclass(frozen=True)
class TransformConfig:
    p_nonlinear: float = 0.9
    p_shuffle: float = 0.5
    p_paint: float = 0.9
    p_inner_given_paint: float = 0.8
    shuffle_window: tuple[int, int, int] = (4, 4, 4)
    paint_block_count_range: tuple[int, int] = (3, 6)
    # None means [dim // 8, dim // 4] per axis.
    paint_block_extent_range: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        for name in ("p_nonlinear", "p_shuffle", "p_paint", "p_inner_given_paint"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} must lie in [0, 1]")
        if len(self.shuffle_window) != 3 or min(self.shuffle_window) < 1:
            raise ValueError(f"shuffle_window must be three extents >= 1, got {self.shuffle_window}")
        lo, hi = self.paint_block_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid paint_block_count_range {self.paint_block_count_range}")
        if self.paint_block_extent_range is not None:
            ranges = tuple(tuple(int(v) for v in r) for r in self.paint_block_extent_range)
            if len(ranges) != 3 or any(not 1 <= a <= b for a, b in ranges):
                raise ValueError(f"invalid paint_block_extent_range {self.paint_block_extent_range}")
            object.__setattr__(self, "paint_block_extent_range", ranges)

    def extent_ranges(self, shape) -> tuple[tuple[int, int], ...]:
        if self.paint_block_extent_range is not None:
            ranges = self.paint_block_extent_range
        else:
            ranges = tuple((max(1, n // 8), max(1, n // 4)) for n in shape)
        for axis, ((a, b), n) in enumerate(zip(ranges, shape)):
            if b > n:
                raise ValueError(f"paint block extent {b} exceeds axis {axis} size {n}")
        return ranges


@dataclass
class TransformStep:
    name: str
    params: dict


@dataclass
class CorruptionRecord:
    applied: list[TransformStep] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.applied]

    @property
    def masks(self) -> list[tuple[tuple[int, int], ...]]:
        """Painting block boxes as per-axis ``(start, stop)`` pairs."""
        return [b for s in self.applied if s.name in ("inner_painting", "outer_painting") for b in s.params["blocks"]]

    @property
    def curve(self):
        for s in self.applied:
            if s.name == "nonlinear_intensity":
                return s.params["points"]
        return None

    @property
    def window_grid(self):
        for s in self.applied:
            if s.name == "local_shuffle":
                return s.params["window"]
        return None

    def extend(self, other: CorruptionRecord) -> None:
        self.applied.extend(other.applied)


def _check_unit_range(x: np.ndarray) -> None:
    if x.size and (x.min() < -_DOMAIN_TOL or x.max() > 1 + _DOMAIN_TOL):
        raise DomainError(f"input must lie in [0, 1], got range [{x.min():.6g}, {x.max():.6g}]")


# --- non-linear intensity -------------------------------------------------


def bezier_points(rng: np.random.Generator) -> np.ndarray:
    """Four control points; the end points are (0,0),(1,1) or, half the time, (0,1),(1,0)."""
    inner = rng.uniform(0.0, 1.0, size=(2, 2))
    if rng.random() < 0.5:
        ends = np.array([[0.0, 1.0], [1.0, 0.0]])
    else:
        ends = np.array([[0.0, 0.0], [1.0, 1.0]])
    return np.array([ends[0], inner[0], inner[1], ends[1]])


def _bernstein(c: np.ndarray, t: np.ndarray) -> np.ndarray:
    s = 1.0 - t
    return c[0] * s**3 + 3 * c[1] * s**2 * t + 3 * c[2] * s * t**2 + c[3] * t**3


def bezier_map(x: np.ndarray, points: np.ndarray, table_size: int = 4097, iters: int = 30) -> np.ndarray:
    """Evaluate the curve as a function of its x coordinate.

    x(t) is non-decreasing whenever the inner x controls lie in [0, 1], so
    each value has a unique preimage t; a lookup table brackets it and
    bisection narrows the bracket.
    """
    points = np.asarray(points, dtype=np.float64)
    px, py = points[:, 0], points[:, 1]
    flat = np.clip(np.asarray(x, dtype=np.float64).ravel(), 0.0, 1.0)
    grid = np.linspace(0.0, 1.0, table_size)
    xs = np.maximum.accumulate(_bernstein(px, grid))
    idx = np.clip(np.searchsorted(xs, flat, side="left"), 1, table_size - 1)
    lo, hi = grid[idx - 1], grid[idx]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = _bernstein(px, mid) < flat
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    return np.clip(_bernstein(py, t), 0.0, 1.0).reshape(np.shape(x))


def nonlinear_intensity(x, rng, points=None):
    x = np.asarray(x, dtype=np.float64)
    _check_unit_range(x)
    if points is None:
        points = bezier_points(rng)
    points = np.asarray(points, dtype=np.float64)
    record = CorruptionRecord([TransformStep("nonlinear_intensity", {"points": points.tolist()})])
    return bezier_map(x, points), record


# --- local shuffle --------------------------------------------------------


def _window_ids(shape, window) -> np.ndarray:
    grids = [np.arange(n) // w for n, w in zip(shape, window)]
    counts = [-(-n // w) for n, w in zip(shape, window)]
    ix, iy, iz = np.meshgrid(*grids, indexing="ij")
    return ((ix * counts[1] + iy) * counts[2] + iz).ravel()


def _apply_shuffle(x: np.ndarray, window, seed: int) -> np.ndarray:
    ids = _window_ids(x.shape, window)
    keys = np.random.default_rng(seed).random(ids.size)
    # Positions grouped by window in raster order vs. the same groups in random order.
    slots = np.argsort(ids, kind="stable")
    sources = np.lexsort((keys, ids))
    flat = x.ravel()
    out = np.empty_like(flat)
    out[slots] = flat[sources]
    return out.reshape(x.shape)


def local_shuffle(x, config: TransformConfig, rng):
    """Permute voxels within each window; edge windows are clipped to the volume."""
    x = np.asarray(x, dtype=np.float64)
    window = tuple(int(w) for w in config.shuffle_window)
    if any(w > n for w, n in zip(window, x.shape)):
        raise ValueError(f"shuffle window {window} larger than volume {x.shape}")
    seed = int(rng.integers(_SEED_BOUND))
    record = CorruptionRecord([TransformStep("local_shuffle", {"window": window, "seed": seed})])
    return _apply_shuffle(x, window, seed), record


# --- painting -------------------------------------------------------------


def _draw_blocks(shape, config: TransformConfig, rng):
    ranges = config.extent_ranges(shape)
    lo, hi = config.paint_block_count_range
    k = int(rng.integers(lo, hi + 1))
    blocks = []
    for _ in range(k):
        box = []
        for (a, b), n in zip(ranges, shape):
            ext = int(rng.integers(a, b + 1))
            start = int(rng.integers(0, n - ext + 1))
            box.append((start, start + ext))
        blocks.append(tuple(box))
    return blocks


def block_mask(shape, blocks) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for box in blocks:
        mask[tuple(slice(a, b) for a, b in box)] = True
    return mask


def _apply_paint(x: np.ndarray, blocks, seed: int, inside: bool) -> np.ndarray:
    noise = np.random.default_rng(seed).random(x.shape)
    mask = block_mask(x.shape, blocks)
    fill = mask if inside else ~mask
    return np.where(fill, noise, x)


def _painting(x, config, rng, inside: bool):
    x = np.asarray(x, dtype=np.float64)
    blocks = _draw_blocks(x.shape, config, rng)
    seed = int(rng.integers(_SEED_BOUND))
    name = "inner_painting" if inside else "outer_painting"
    record = CorruptionRecord([TransformStep(name, {"blocks": blocks, "seed": seed})])
    return _apply_paint(x, blocks, seed, inside), record


def inner_painting(x, config: TransformConfig, rng):
    """Replace the voxels of k random blocks with uniform noise."""
    return _painting(x, config, rng, inside=True)


def outer_painting(x, config: TransformConfig, rng):
    """Keep k random blocks and replace everything else with uniform noise."""
    return _painting(x, config, rng, inside=False)


# --- composition ----------------------------------------------------------


def corrupt(x, config: TransformConfig, rng):
    """Apply intensity curve, shuffle and one painting mode, each with its probability."""
    x = np.asarray(x)
    _check_unit_range(x)
    out = np.asarray(x, dtype=np.float64)
    record = CorruptionRecord()
    if rng.random() < config.p_nonlinear:
        out, r = nonlinear_intensity(out, rng)
        record.extend(r)
    if rng.random() < config.p_shuffle:
        out, r = local_shuffle(out, config, rng)
        record.extend(r)
    if rng.random() < config.p_paint:
        if rng.random() < config.p_inner_given_paint:
            out, r = inner_painting(out, config, rng)
        else:
            out, r = outer_painting(out, config, rng)
        record.extend(r)
    if out is x:
        out = out.copy()
    return out, record


def replay(x, record: CorruptionRecord) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    for step in record.applied:
        p = step.params
        if step.name == "nonlinear_intensity":
            out = bezier_map(out, np.asarray(p["points"]))
        elif step.name == "local_shuffle":
            out = _apply_shuffle(out, p["window"], p["seed"])
        elif step.name == "inner_painting":
            out = _apply_paint(out, p["blocks"], p["seed"], inside=True)
        elif step.name == "outer_painting":
            out = _apply_paint(out, p["blocks"], p["seed"], inside=False)
        else:
            raise ValueError(f"unknown transform {step.name!r} in record")
    return out
