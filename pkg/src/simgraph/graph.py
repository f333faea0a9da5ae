"""Bottom-up construction of the similarity graph.

Nodes are squared coordinate differences of normalized embeddings. Edges
between adjacent levels come from the overlap of class activation maps: CAMs
are average-pooled to a common grid, flattened, unit-normalized and compared
by inner product. The dataset-level edge matrices are an exponential moving
average of these per-sample correlations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .features import EmbeddingVector, LinearizedMap, ProjectionLayer, _as_array, _check_proj


@dataclass(frozen=True)
class SimilarityNodeVector:
    values: np.ndarray
    level: int = 1


@dataclass(frozen=True)
class CAMStack:
    maps: np.ndarray  # (r, h, w)
    level: int = 1

    @property
    def dims(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True)
class RescaledCAM:
    vector: np.ndarray
    is_zero: bool = False


def compute_similarity_nodes(e: EmbeddingVector, e_other: EmbeddingVector) -> SimilarityNodeVector:
    a, b = np.asarray(e.values), np.asarray(e_other.values)
    if a.shape != b.shape:
        raise ShapeError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    if e.level != e_other.level:
        raise ShapeError(f"embedding level mismatch: {e.level} vs {e_other.level}")
    return SimilarityNodeVector((a - b) ** 2, e.level)


def compute_cams(z_lin: LinearizedMap, proj: ProjectionLayer) -> CAMStack:
    data = _as_array(z_lin)
    _check_proj(proj, data.shape[0])
    maps = np.tensordot(proj.weights, data, axes=(1, 0))
    return CAMStack(maps, getattr(z_lin, "level", proj.level))


def area_pool_matrix(n: int, m: int) -> np.ndarray:
    """``m x n`` matrix that area-averages a length-``n`` axis down to ``m`` cells.

    Output cell ``a`` covers ``[a*n/m, (a+1)*n/m)``; each input cell contributes
    in proportion to its overlap. Integer block means when ``m`` divides ``n``.
    """
    if not 1 <= m <= n:
        raise ShapeError(f"can only downsample: source {n}, target {m}")
    a = np.arange(m)[:, None]
    b = np.arange(n)[None, :]
    overlap = np.minimum((a + 1) * n, (b + 1) * m) - np.maximum(a * n, b * m)
    return np.clip(overlap, 0, None) / n


def cam_target_dims(dims_a, dims_b) -> tuple[int, int]:
    return min(dims_a[0], dims_b[0]), min(dims_a[1], dims_b[1])


def rescale_cams(maps: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-pool a ``(..., h, w)`` stack to ``target`` and flatten row-major."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]
    rh = area_pool_matrix(h, target[0])
    rw = area_pool_matrix(w, target[1])
    pooled = np.einsum("ah,...hw,bw->...ab", rh, maps, rw)
    return pooled.reshape(*maps.shape[:-2], target[0] * target[1])


def normalize_cam_vectors(vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize rows; all-zero rows stay zero and are flagged."""
    norm = np.linalg.norm(vecs, axis=-1, keepdims=True)
    zero = norm[..., 0] == 0
    safe = np.where(norm == 0, 1.0, norm)
    return np.where(norm == 0, 0.0, vecs / safe), zero


def rescale_and_normalize_cam(u: np.ndarray, target: tuple[int, int]) -> RescaledCAM:
    vec = rescale_cams(np.asarray(u, dtype=np.float64)[None], target)[0]
    normed, zero = normalize_cam_vectors(vec[None])
    return RescaledCAM(normed[0], bool(zero[0]))


def rescaled_stack(cams: CAMStack, target: tuple[int, int]) -> np.ndarray:
    return normalize_cam_vectors(rescale_cams(cams.maps, target))[0]


def pair_correlations(cams_l: CAMStack, cams_lm1: CAMStack) -> np.ndarray:
    """``r x r`` inner products between rescaled CAMs of level l (rows) and l-1."""
    target = cam_target_dims(cams_l.dims, cams_lm1.dims)
    hi = rescaled_stack(cams_l, target)
    lo = rescaled_stack(cams_lm1, target)
    return hi @ lo.T


def pair_edge_correlations(cams_x: CAMStack, cams_x_lm1: CAMStack,
                           cams_y: CAMStack, cams_y_lm1: CAMStack) -> np.ndarray:
    """Swap-symmetric statistic for a pair: mean of both samples' matrices."""
    return 0.5 * (pair_correlations(cams_x, cams_x_lm1) + pair_correlations(cams_y, cams_y_lm1))


def _check_gamma(gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"momentum gamma must lie in [0, 1], got {gamma}")


@dataclass
class EdgeStore:
    """Momentum-averaged inter-level correlations.

    ``matrices[l - 2]`` holds the ``r x r`` edges between level ``l`` (rows)
    and level ``l - 1`` (columns), for ``l = 2..L``.
    """

    matrices: list[np.ndarray]
    gamma: float = 0.95
    update_count: int = 0
    n_levels: int = field(default=0)

    def __post_init__(self):
        _check_gamma(self.gamma)
        self.matrices = [np.asarray(m, dtype=np.float64) for m in self.matrices]
        if not self.n_levels:
            self.n_levels = len(self.matrices) + 1
        if len(self.matrices) != self.n_levels - 1:
            raise ShapeError(f"{self.n_levels} levels need {self.n_levels - 1} edge matrices")
        shapes = {m.shape for m in self.matrices}
        if len(shapes) > 1 or any(len(s) != 2 or s[0] != s[1] for s in shapes):
            raise ShapeError(f"edge matrices must be square and equal-sized, got {shapes}")
        for m in self.matrices:
            if not np.all(np.isfinite(m)):
                raise ValueError("edge matrices contain non-finite entries")

    @classmethod
    def zeros(cls, n_levels, r, gamma=0.95) -> "EdgeStore":
        return cls([np.zeros((r, r)) for _ in range(n_levels - 1)], gamma, 0, n_levels)

    @property
    def r(self) -> int:
        return self.matrices[0].shape[0] if self.matrices else 0

    def matrix(self, level: int) -> np.ndarray:
        if not 2 <= level <= self.n_levels:
            raise ShapeError(f"no edges into level {level} (levels 2..{self.n_levels})")
        return self.matrices[level - 2]

    def copy(self) -> "EdgeStore":
        return EdgeStore([m.copy() for m in self.matrices], self.gamma, self.update_count, self.n_levels)


def batch_edge_update(store: EdgeStore, per_sample) -> EdgeStore:
    """One momentum step with the batch mean of per-sample correlations.

    ``per_sample`` is an array ``(B, L-1, r, r)`` (or a sequence of per-sample
    lists of matrices). The input store is left untouched.
    """
    _check_gamma(store.gamma)
    batch = np.asarray(per_sample, dtype=np.float64)
    expected = (store.n_levels - 1, store.r, store.r)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"per-sample correlations must be (B, {expected}), got {batch.shape}")
    if batch.shape[0] == 0:
        raise ShapeError("empty batch")
    if not np.all(np.isfinite(batch)):
        raise ValueError("non-finite correlation matrix in batch")
    mean = batch.mean(axis=0)
    g = store.gamma
    new = [g * m + (1.0 - g) * mean[i] for i, m in enumerate(store.matrices)]
    return EdgeStore(new, g, store.update_count + 1, store.n_levels)
