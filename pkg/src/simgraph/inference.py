"""Top-down similarity inference.

Each node above the first level is gated by a reliability ``p`` derived from
how peaked the two samples' CAMs are. The node keeps a share ``p`` of its own
value and takes the rest from its ``k`` most correlated nodes one level down
(already rectified), weighted by the normalized dataset-level edges. The
overall dissimilarity is the sum of the rectified top-level nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError
from .graph import EdgeStore


@dataclass
class InferenceParams:
    """Node-wise gate parameters for levels ``2..L``; row ``l - 2`` is level ``l``."""

    alpha: np.ndarray
    beta: np.ndarray
    k: int

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 2:
            raise ShapeError(f"alpha {self.alpha.shape} and beta {self.beta.shape} must be equal (L-1, r)")
        r = self.alpha.shape[1]
        if not 1 <= self.k <= r:
            raise ConfigError(f"k must lie in [1, {r}], got {self.k}")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ValueError("inference parameters contain non-finite values")

    @classmethod
    def initial(cls, n_levels, r, k=None) -> "InferenceParams":
        k = max(1, r // 4) if k is None else k
        return cls(np.ones((n_levels - 1, r)), np.zeros((n_levels - 1, r)), k)

    @property
    def n_levels(self) -> int:
        return self.alpha.shape[0] + 1

    @property
    def r(self) -> int:
        return self.alpha.shape[1]

    def copy(self) -> "InferenceParams":
        return InferenceParams(self.alpha.copy(), self.beta.copy(), self.k)


@dataclass(frozen=True)
class ReliabilityVector:
    values: np.ndarray  # p
    raw: np.ndarray  # eta


@dataclass(frozen=True)
class RectifiedNodes:
    values: list[np.ndarray]
    overall: np.ndarray | float
    level_sums: list[np.ndarray]


def cam_spread(cam_vectors: np.ndarray) -> np.ndarray:
    """Population standard deviation of each rescaled, normalized CAM vector."""
    return np.asarray(cam_vectors, dtype=np.float64).std(axis=-1)


def gate(params: InferenceParams, level: int, eta: np.ndarray) -> np.ndarray:
    if not 2 <= level <= params.n_levels:
        raise ShapeError(f"reliability is defined for levels 2..{params.n_levels}, got {level}")
    return expit(params.alpha[level - 2] * eta + params.beta[level - 2])


def compute_reliability(cams_x: np.ndarray, cams_y: np.ndarray, params: InferenceParams,
                        level: int) -> ReliabilityVector:
    """``p_i = sigmoid(alpha_i * std(u_i) * std(u'_i) + beta_i)`` for one level.

    ``cams_x`` and ``cams_y`` are ``(r, p)`` stacks of rescaled normalized CAMs.
    """
    eta = cam_spread(cams_x) * cam_spread(cams_y)
    return ReliabilityVector(gate(params, level, eta), eta)


def top_k_indices(edge_row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ties to the lowest index, ascending."""
    row = np.asarray(edge_row, dtype=np.float64)
    if not 1 <= k <= row.shape[0]:
        raise ConfigError(f"k must lie in [1, {row.shape[0]}], got {k}")
    order = np.argsort(-row, kind="stable")
    return np.sort(order[:k])


def normalize_edges(edge_row: np.ndarray, index_set) -> np.ndarray:
    row = np.asarray(edge_row, dtype=np.float64)
    idx = np.asarray(index_set, dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("index set must be nonempty")
    out = np.zeros_like(row)
    selected = np.clip(row[idx], 0.0, None)
    total = selected.sum()
    if total > 0:
        out[idx] = selected / total
    else:
        out[idx] = 1.0 / idx.size
    return out


def mixing_matrix(edges: np.ndarray, k: int) -> np.ndarray:
    """Row-stochastic ``W~`` for one level from the raw edge matrix."""
    edges = np.asarray(edges, dtype=np.float64)
    return np.stack([normalize_edges(row, top_k_indices(row, k)) for row in edges])


def mixing_matrices(store: EdgeStore, k: int) -> list[np.ndarray]:
    return [mixing_matrix(m, k) for m in store.matrices]


def rectify_arrays(deltas, gates, weights) -> RectifiedNodes:
    """Matrix recursion over arrays with any leading batch shape.

    ``deltas``: L arrays ``(..., r)``; ``gates``: L-1 arrays for levels 2..L;
    ``weights``: L-1 row-stochastic ``r x r`` matrices.
    """
    deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
    if len(gates) != len(deltas) - 1 or len(weights) != len(deltas) - 1:
        raise ShapeError(
            f"{len(deltas)} levels need {len(deltas) - 1} gate vectors and mixing matrices, "
            f"got {len(gates)} and {len(weights)}"
        )
    shape = deltas[0].shape
    for d in deltas:
        if d.shape != shape:
            raise ShapeError(f"node vectors must share one shape, got {d.shape} vs {shape}")
    r = shape[-1]
    rect = [deltas[0]]
    for d, p, w in zip(deltas[1:], gates, weights):
        if np.shape(w) != (r, r):
            raise ShapeError(f"mixing matrix must be {r}x{r}, got {np.shape(w)}")
        rect.append(p * d + (1.0 - p) * (rect[-1] @ np.asarray(w).T))
    overall = rect[-1].sum(axis=-1)
    level_sums = [d.sum(axis=-1) for d in deltas]
    return RectifiedNodes(rect, overall, level_sums)


def rectify(nodes, reliabilities, store: EdgeStore, params: InferenceParams) -> RectifiedNodes:
    deltas = [getattr(n, "values", n) for n in nodes]
    if store.n_levels != len(deltas) or (store.matrices and store.r != np.shape(deltas[0])[-1]):
        raise ShapeError(
            f"edge store is for L={store.n_levels}, r={store.r}; nodes have "
            f"L={len(deltas)}, r={np.shape(deltas[0])[-1]}"
        )
    gates = [getattr(p, "values", p) for p in reliabilities]
    return rectify_arrays(deltas, gates, mixing_matrices(store, params.k))
