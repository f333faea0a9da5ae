"""Feature pyramids, pooling linearization and per-level projection heads.

A feature map is a ``(channels, height, width)`` volume. Pooling follows the
max + average scheme; to keep class activation maps consistent with the
pooled embedding, the max half is rewritten as an average over a rescaled
copy of the maximal elements (``linearize_map``) so that pooling and the
linear projection commute.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DegenerateEmbeddingError, ShapeError


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray
    level: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"feature map must be 3-D (c, h, w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"feature map dims must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite entries")
        if self.level < 1:
            raise ShapeError(f"level must be >= 1, got {self.level}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class FeaturePyramid:
    """Multi-level activations of one sample, ordered bottom to top."""

    levels: tuple[FeatureMap, ...]
    sample_id: str = ""
    label: int = 0

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ShapeError("a pyramid needs at least one level")
        idx = [m.level for m in levels]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ShapeError(f"level indices must be strictly increasing, got {idx}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_arrays(cls, arrays, sample_id="", label=0) -> "FeaturePyramid":
        return cls(tuple(FeatureMap(a, i + 1) for i, a in enumerate(arrays)), sample_id, label)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [m.shape for m in self.levels]

    def arrays(self) -> list[np.ndarray]:
        return [m.data for m in self.levels]


@dataclass(frozen=True)
class LinearizedMap:
    data: np.ndarray
    level: int


@dataclass
class ProjectionLayer:
    """Bias-free linear head ``r x c`` for one level."""

    weights: np.ndarray
    level: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"projection weights must be a matrix, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("projection weights contain non-finite entries")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def random(cls, r, c, level=1, rng=None) -> "ProjectionLayer":
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, 1.0 / np.sqrt(c), size=(r, c)), level)


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    level: int = 1
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


def _as_array(z) -> np.ndarray:
    if isinstance(z, (FeatureMap, LinearizedMap)):
        return np.asarray(z.data, dtype=np.float64)
    return np.asarray(z, dtype=np.float64)


def _level(z, default=1) -> int:
    return getattr(z, "level", default)


def linearize_array(z: np.ndarray) -> np.ndarray:
    """Array form of :func:`linearize_map`; works on ``(..., h, w)`` stacks."""
    z = np.asarray(z, dtype=np.float64)
    hw = z.shape[-2] * z.shape[-1]
    mx = z.max(axis=(-2, -1), keepdims=True)
    is_max = z == mx
    n_max = is_max.sum(axis=(-2, -1), keepdims=True)
    scale = hw / n_max
    return z + np.where(is_max, scale * z, 0.0)


def linearize_map(z: FeatureMap) -> LinearizedMap:
    """Return ``g~(z) + z`` channel-wise.

    Every maximal element of a channel is multiplied by ``K = HW / #max`` and
    the rest are zeroed before adding the original map back, so the spatial
    mean of each output channel equals ``max + mean`` of the input channel.
    """
    return LinearizedMap(linearize_array(_as_array(z)), _level(z))


def max_avg_pool(z) -> np.ndarray:
    """Reference ``g_max + g_avg`` pooling on the raw map."""
    z = _as_array(z)
    return z.max(axis=(-2, -1)) + z.mean(axis=(-2, -1))


def _check_proj(proj: ProjectionLayer, channels: int):
    if proj.in_dim != channels:
        raise ShapeError(
            f"projection expects {proj.in_dim} input channels but the map has {channels}"
        )


def pool_and_project(z_lin: LinearizedMap, proj: ProjectionLayer) -> EmbeddingVector:
    data = _as_array(z_lin)
    _check_proj(proj, data.shape[0])
    pooled = data.mean(axis=(1, 2))
    return EmbeddingVector(proj.weights @ pooled, _level(z_lin))


def normalize_embedding(e: EmbeddingVector) -> EmbeddingVector:
    values = e.values if isinstance(e, EmbeddingVector) else np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(values)
    if not norm > 0:
        raise DegenerateEmbeddingError(f"cannot normalize an embedding with norm {norm}")
    return EmbeddingVector(values / norm, _level(e))


def normalize_rows(e: np.ndarray) -> np.ndarray:
    """Batched normalization; raises on any zero row rather than adding an epsilon."""
    e = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(~(norm > 0)):
        raise DegenerateEmbeddingError("zero-norm embedding in batch")
    return e / norm
