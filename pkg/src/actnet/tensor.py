"""Dense feature-map container, vector helpers and seeded randomness.

All in-memory numeric work is 64-bit; the on-disk feature format is 32-bit
and gets widened on load.  Feature maps use one fixed channel-major layout:
the flat index of channel k, row j, column i is ``k*H*W + j*W + i``, which
is exactly C order for an array of shape ``(depth, height, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass(frozen=True)
class FeatureMap:
    """Non-negative activation tensor of one convolutional layer of one image.

    ``values`` has shape ``(depth, height, width)`` and dtype float64.
    Treated as immutable after construction; safe to share across threads.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ShapeError(f"feature map must be (depth, height, width), got shape {v.shape}")
        if min(v.shape) < 1:
            raise ShapeError(f"feature map dimensions must be positive, got shape {v.shape}")
        if v.dtype != np.float64:
            v = v.astype(np.float64)
        object.__setattr__(self, "values", v)
        if not np.isfinite(v).all():
            bad = int(np.flatnonzero(~np.isfinite(v.ravel()))[0])
            raise DataError(f"feature map value at flat index {bad} is not finite")
        if (v < 0).any():
            bad = int(np.flatnonzero(v.ravel() < 0)[0])
            raise DataError(f"feature map value at flat index {bad} is negative")

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_flat(cls, width, height, depth, flat) -> "FeatureMap":
        """Build from the canonical flat layout (index = k*H*W + j*W + i)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != width * height * depth:
            raise ShapeError(
                f"expected {width * height * depth} values for "
                f"{width}x{height}x{depth}, got {flat.size}"
            )
        return cls(flat.reshape(depth, height, width))

    def flat(self) -> np.ndarray:
        """The values in the canonical flat layout."""
        return self.values.ravel()


def tensor_map(t: FeatureMap, f) -> FeatureMap:
    """Apply a scalar function to every element, preserving shape.

    ``f`` is expected to broadcast over numpy arrays (plain arithmetic
    does); scalar-only callables are lifted with np.vectorize.
    """
    try:
        out = np.asarray(f(t.values), dtype=np.float64)
        if out.shape != t.values.shape:
            raise ValueError
    except (TypeError, ValueError):
        out = np.vectorize(f, otypes=[np.float64])(t.values)
    return FeatureMap(out)


def euclidean_distance(a, b) -> float:
    """Euclidean distance between two equal-dimension vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"distance needs equal-dim vectors, got {a.shape} and {b.shape}")
    return float(np.linalg.norm(a - b))


def l2_normalize(v, min_norm=1e-12) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < min_norm:
        raise DataError(f"degenerate vector: norm {n:g} below {min_norm:g}")
    return v / n


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; an identical seed yields an identical stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent child stream for (seed, keys), e.g. one per image.

    Distinct key tuples give statistically independent streams while staying
    fully reproducible from the single master seed.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
