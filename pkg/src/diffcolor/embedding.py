"""Text/image embedding vector shared by the guidance and diffusion layers."""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DimensionMismatch


@dataclasses.dataclass(frozen=True)
class TextEmbedding:
    """1-D float64 vector in the conditioning space of a backend."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def require_dim(self, dim: int) -> None:
        if self.dim != dim:
            raise DimensionMismatch(f"embedding dim {self.dim} != expected {dim}")
