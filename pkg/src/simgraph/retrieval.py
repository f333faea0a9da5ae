"""Recall@K over row-sliced dissimilarity matrices.

Every query row is computed on its own with identical array shapes, so the
matrix assembled from any slicing is bit-identical to the unsliced one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError
from .inference import rectify_arrays
from .model import Encoded, SimilarityModel, pair_gates, pair_nodes

DISTANCES = ("full", "open", "top", "multi", "reliability", "concat")


@dataclass(frozen=True)
class SimilarityMatrixSlice:
    query_start: int
    query_stop: int
    gallery_size: int
    values: np.ndarray  # (query_stop - query_start, gallery_size)
    self_mask: np.ndarray  # True where query == gallery item

    @property
    def rows(self) -> range:
        return range(self.query_start, self.query_stop)


@dataclass(frozen=True)
class RecallResult:
    ks: list[int]
    recalls: list[float]
    n_queries: int

    def as_dict(self) -> dict:
        return {"ks": list(self.ks), "recalls": list(self.recalls), "n_queries": self.n_queries}

    def table(self) -> str:
        head = "  ".join(f"{'R@' + str(k):>7}" for k in self.ks)
        vals = "  ".join(f"{100 * r:7.2f}" for r in self.recalls)
        return f"{head}\n{vals}"


def _unit_concat(enc: Encoded) -> np.ndarray:
    cat = np.concatenate(enc.raw, axis=1)
    return cat / np.linalg.norm(cat, axis=1, keepdims=True)


def row_function(model: SimilarityModel, query: Encoded, gallery: Encoded,
                 kind: str = "full") -> Callable[[int], np.ndarray]:
    """Return ``f(i)`` giving the dissimilarities of query ``i`` to the whole gallery."""
    if kind == "full":
        mixing = model.mixing()
        return lambda i: model.row(query, i, gallery, mixing).overall
    if kind == "open":
        # Every gate forced to 1: the rectified graph collapses to the top level.
        mixing = model.mixing()

        def opened(i):
            deltas = pair_nodes(query, i, gallery)
            return rectify_arrays(deltas, [np.ones_like(d) for d in deltas[1:]], mixing).overall
        return opened
    if kind == "top":
        return lambda i: pair_nodes(query, i, gallery)[-1].sum(axis=-1)
    if kind == "multi":
        def multi(i):
            return sum(d.sum(axis=-1) for d in pair_nodes(query, i, gallery)) / len(query.unit)
        return multi
    if kind == "reliability":
        def reliable(i):
            deltas = pair_nodes(query, i, gallery)
            gates, _ = pair_gates(query, i, gallery, model.params)
            total = deltas[0].sum(axis=-1)
            for d, p in zip(deltas[1:], gates):
                total = total + (p * d).sum(axis=-1)
            return total / len(deltas)
        return reliable
    if kind == "concat":
        q, g = _unit_concat(query), _unit_concat(gallery)
        return lambda i: ((q[i] - g) ** 2).sum(axis=-1)
    raise ConfigError(f"unknown distance kind {kind!r}; choose from {DISTANCES}")


def sliced_similarity(row_fn: Callable[[int], np.ndarray], n_queries: int, gallery_size: int,
                      slice_rows: int, same_set: bool = True) -> Iterator[SimilarityMatrixSlice]:
    if slice_rows < 1:
        raise ConfigError(f"slice_rows must be >= 1, got {slice_rows}")
    for start in range(0, n_queries, slice_rows):
        stop = min(start + slice_rows, n_queries)
        values = np.stack([row_fn(i) for i in range(start, stop)])
        mask = np.zeros_like(values, dtype=bool)
        if same_set:
            rows = np.arange(start, stop)
            mask[rows - start, rows] = True
        yield SimilarityMatrixSlice(start, stop, gallery_size, values, mask)


def assemble(slices) -> np.ndarray:
    return np.concatenate([s.values for s in slices], axis=0)


def recall_at_k(slices, labels, ks, gallery_labels=None) -> RecallResult:
    """Fraction of queries with a same-label item among their K nearest.

    Neighbours are gallery items sorted by ascending dissimilarity with ties
    to the lower gallery index; masked self-matches are skipped.
    """
    labels = np.asarray(labels)
    gallery_labels = labels if gallery_labels is None else np.asarray(gallery_labels)
    ks = [int(k) for k in ks]
    if not ks or ks != sorted(ks) or ks[0] < 1:
        raise ConfigError(f"ks must be positive and ascending, got {ks}")
    kmax = ks[-1]
    hits = np.zeros(len(ks))
    n = 0
    for sl in slices:
        if kmax >= sl.gallery_size:
            raise ConfigError(f"K={kmax} must be smaller than the gallery size {sl.gallery_size}")
        for row, mask, qi in zip(sl.values, sl.self_mask, sl.rows):
            candidates = np.flatnonzero(~mask)
            order = candidates[np.argsort(row[candidates], kind="stable")][:kmax]
            match = gallery_labels[order] == labels[qi]
            first = np.argmax(match) if match.any() else kmax
            hits += np.array([first < k for k in ks])
            n += 1
    if n == 0:
        raise ConfigError("no queries")
    return RecallResult(ks, list(hits / n), n)


def evaluate(model: SimilarityModel, enc: Encoded, ks, kind="full", slice_rows=64) -> RecallResult:
    """Leave-one-out Recall@K with the dataset as both query and gallery set."""
    fn = row_function(model, enc, enc, kind)
    return recall_at_k(sliced_similarity(fn, enc.n, enc.n, slice_rows), enc.labels, ks)
