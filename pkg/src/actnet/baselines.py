"""Baseline aggregation heads without activation layers.

Direct aggregation (plain average pooling), max pooling and generalized
mean pooling, each over the same K layers as the learnable head: pool per
layer, concatenate, whiten with a PCA+whitening fit, L2-normalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StateError
from .head import (
    WhiteningLayer,
    extract_vectors,
    fit_whitening,
    gem_pool,
    global_average_pool,
    global_max_pool,
)
from .tensor import l2_normalize

BASELINE_POOLS = ("da", "max", "gem")

GEM_DEFAULT_P = 3.0


@dataclass
class BaselineHead:
    """Pool-concat-whiten-normalize head with no learnable activation."""

    pool: str
    gem_p: float = GEM_DEFAULT_P
    whitening: WhiteningLayer | None = None

    def __post_init__(self):
        if self.pool not in BASELINE_POOLS:
            raise ParameterError(f"pool must be one of {BASELINE_POOLS}, got {self.pool!r}")
        if self.gem_p < 1:
            raise ParameterError(f"gem exponent must be >= 1, got {self.gem_p}")

    def pre_projection(self, maps) -> np.ndarray:
        if self.pool == "da":
            pooled = [global_average_pool(t) for t in maps]
        elif self.pool == "max":
            pooled = [global_max_pool(t) for t in maps]
        else:
            pooled = [gem_pool(t, self.gem_p) for t in maps]
        return np.concatenate(pooled)

    def fit(self, maps_by_id, out_dim=None, threads: int = 1) -> "BaselineHead":
        """Fit the whitening layer on a training split's pooled vectors."""
        _, vectors = extract_vectors(maps_by_id, self.pre_projection, threads)
        self.whitening = fit_whitening(vectors, out_dim=out_dim)
        return self

    def describe(self, maps) -> np.ndarray:
        if self.whitening is None:
            raise StateError("baseline head must be fitted before describing images")
        d = self.whitening.projection @ (self.pre_projection(maps) + self.whitening.bias)
        return l2_normalize(d)

    def extract(self, maps_by_id, threads: int = 1):
        """Descriptors for every image, merged in sorted-id order."""
        return extract_vectors(maps_by_id, self.describe, threads)
