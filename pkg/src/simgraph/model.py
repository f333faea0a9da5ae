"""Batched encoding of pyramids and pairwise evaluation of the graph.

``prepare`` linearizes every level once; projections change during training
so everything downstream of them is recomputed by ``encode``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .features import FeaturePyramid, ProjectionLayer, linearize_array, normalize_rows
from .graph import EdgeStore, cam_target_dims, normalize_cam_vectors, rescale_cams
from .inference import InferenceParams, cam_spread, mixing_matrices, rectify_arrays


@dataclass
class FeatureCache:
    linearized: list[np.ndarray]  # per level (N, c, h, w)
    pooled: list[np.ndarray]  # per level (N, c)
    labels: np.ndarray
    ids: list[str]

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [z.shape[2:] for z in self.linearized]

    @property
    def level_shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(z.shape[1:]) for z in self.linearized]

    def subset(self, idx) -> "FeatureCache":
        idx = np.asarray(idx)
        return FeatureCache([z[idx] for z in self.linearized], [v[idx] for v in self.pooled],
                            self.labels[idx], [self.ids[i] for i in idx])


def prepare(pyramids: list[FeaturePyramid]) -> FeatureCache:
    if not pyramids:
        raise ShapeError("empty dataset")
    shapes = pyramids[0].shapes
    for p in pyramids:
        if p.shapes != shapes:
            raise ShapeError(f"sample {p.sample_id!r} has level shapes {p.shapes}, expected {shapes}")
    linearized, pooled = [], []
    for lvl in range(len(shapes)):
        z = linearize_array(np.stack([p.levels[lvl].data for p in pyramids]))
        linearized.append(z)
        pooled.append(z.mean(axis=(2, 3)))
    labels = np.array([p.label for p in pyramids])
    return FeatureCache(linearized, pooled, labels, [p.sample_id for p in pyramids])


@dataclass
class Encoded:
    raw: list[np.ndarray]  # (N, r) embeddings per level
    unit: list[np.ndarray]  # normalized embeddings
    spread: list[np.ndarray]  # levels 2..L, (N, r) CAM std
    correlations: np.ndarray | None  # (N, L-1, r, r)
    labels: np.ndarray
    ids: list[str]

    @property
    def n(self) -> int:
        return len(self.labels)


def level_cams(cache: FeatureCache, weights: list[np.ndarray], level: int) -> np.ndarray:
    """``(N, r, h, w)`` CAMs of one level (1-based)."""
    return np.einsum("rc,nchw->nrhw", weights[level - 1], cache.linearized[level - 1])


def encode(cache: FeatureCache, weights: list[np.ndarray], with_correlations=True) -> Encoded:
    """Embeddings, CAM spreads and (optionally) per-sample edge correlations."""
    if len(weights) != len(cache.pooled):
        raise ShapeError(f"{len(weights)} projections for {len(cache.pooled)} levels")
    raw = []
    for w, v in zip(weights, cache.pooled):
        if w.shape[1] != v.shape[1]:
            raise ShapeError(f"projection expects {w.shape[1]} channels, level has {v.shape[1]}")
        raw.append(v @ w.T)
    unit = [normalize_rows(e) for e in raw]
    spread, corr = [], []
    cams_below = level_cams(cache, weights, 1)
    for lvl in range(2, len(weights) + 1):
        cams = level_cams(cache, weights, lvl)
        target = cam_target_dims(cams.shape[2:], cams_below.shape[2:])
        hi, _ = normalize_cam_vectors(rescale_cams(cams, target))
        spread.append(cam_spread(hi))
        if with_correlations:
            lo, _ = normalize_cam_vectors(rescale_cams(cams_below, target))
            corr.append(np.einsum("nip,njp->nij", hi, lo))
        cams_below = cams
    correlations = np.stack(corr, axis=1) if with_correlations and corr else None
    return Encoded(raw, unit, spread, correlations, cache.labels, cache.ids)


def pair_nodes(a: Encoded, i: int, b: Encoded, idx=None) -> list[np.ndarray]:
    """Similarity nodes of sample ``i`` of ``a`` against samples ``idx`` of ``b``."""
    sel = slice(None) if idx is None else idx
    return [(ua[i] - ub[sel]) ** 2 for ua, ub in zip(a.unit, b.unit)]


def pair_gates(a: Encoded, i: int, b: Encoded, params: InferenceParams, idx=None):
    sel = slice(None) if idx is None else idx
    etas = [sa[i] * sb[sel] for sa, sb in zip(a.spread, b.spread)]
    gates = [expit(params.alpha[l] * eta + params.beta[l]) for l, eta in enumerate(etas)]
    return gates, etas


@dataclass
class SimilarityModel:
    """Projection heads plus the inference state needed to score pairs."""

    projections: list[np.ndarray]
    params: InferenceParams
    edges: EdgeStore

    @classmethod
    def initial(cls, level_shapes, r, k, gamma, seed=0) -> "SimilarityModel":
        rng = np.random.default_rng([seed, 7])
        projections = [ProjectionLayer.random(r, c, lvl + 1, rng).weights
                       for lvl, (c, _, _) in enumerate(level_shapes)]
        n = len(level_shapes)
        return cls(projections, InferenceParams.initial(n, r, k), EdgeStore.zeros(n, r, gamma))

    @property
    def n_levels(self) -> int:
        return len(self.projections)

    def mixing(self) -> list[np.ndarray]:
        return mixing_matrices(self.edges, self.params.k)

    def encode(self, cache: FeatureCache, with_correlations=False) -> Encoded:
        return encode(cache, self.projections, with_correlations)

    def row(self, a: Encoded, i: int, b: Encoded, mixing=None, idx=None):
        """Rectified result of one query against a gallery (or subset)."""
        mixing = self.mixing() if mixing is None else mixing
        deltas = pair_nodes(a, i, b, idx)
        gates, _ = pair_gates(a, i, b, self.params, idx)
        return rectify_arrays(deltas, gates, mixing)

    def dissimilarity(self, x: FeaturePyramid, y: FeaturePyramid) -> float:
        enc = self.encode(prepare([x, y]))
        return float(self.row(enc, 0, enc, idx=np.array([1])).overall[0])
