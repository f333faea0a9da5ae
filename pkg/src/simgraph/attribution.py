"""Attribution of the overall dissimilarity to individual nodes.

The rectification recursion is linear in the node values, so the overall
dissimilarity is ``sum_l sum_i lambda^l_i * delta^l_i`` with coefficients
obtained by a single backward sweep through the gates and mixing matrices.
Because every mixing matrix is row-stochastic the coefficients always sum to
``r``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .graph import EdgeStore
from .inference import InferenceParams, mixing_matrices

RANK_KEYS = ("reliability", "node_value", "contribution", "reliability_then_value")


@dataclass(frozen=True)
class SensitivityField:
    lambdas: list[np.ndarray]

    def contributions(self, deltas) -> list[np.ndarray]:
        return [lam * np.asarray(d) for lam, d in zip(self.lambdas, deltas)]

    def total(self):
        return sum(lam.sum(axis=-1) for lam in self.lambdas)

    def reconstruct(self, deltas):
        return sum((c.sum(axis=-1) for c in self.contributions(deltas)))


def sensitivities_from_weights(gates, weights) -> SensitivityField:
    """Backward sweep; ``gates`` for levels 2..L may carry batch dimensions."""
    gates = [np.asarray(p, dtype=np.float64) for p in gates]
    if len(weights) != len(gates):
        raise ShapeError(f"{len(gates)} gate vectors but {len(weights)} mixing matrices")
    if not gates:
        raise ShapeError("need at least one gated level; a single-level graph has lambda = 1 everywhere")
    upstream = np.ones_like(gates[-1])
    lambdas = []
    for p, w in zip(reversed(gates), reversed(weights)):
        lambdas.append(upstream * p)
        upstream = (upstream * (1.0 - p)) @ np.asarray(w)
    lambdas.append(upstream)
    return SensitivityField(lambdas[::-1])


def compute_sensitivities(reliabilities, store: EdgeStore, params: InferenceParams) -> SensitivityField:
    gates = [getattr(p, "values", p) for p in reliabilities]
    if store.n_levels == 1:
        return SensitivityField([np.ones(params.r)])
    if len(gates) != store.n_levels - 1:
        raise ShapeError(f"expected {store.n_levels - 1} reliability vectors, got {len(gates)}")
    if np.shape(gates[0])[-1] != store.r:
        raise ShapeError(f"reliability length {np.shape(gates[0])[-1]} != edge size {store.r}")
    return sensitivities_from_weights(gates, mixing_matrices(store, params.k))


@dataclass(frozen=True)
class NodeRecord:
    level: int  # 1-based
    index: int
    delta: float
    p: float
    lam: float
    cam_files: tuple[str, str] | None = None

    @property
    def contribution(self) -> float:
        return self.lam * self.delta

    def as_dict(self) -> dict:
        out = {
            "level": self.level,
            "index": self.index,
            "delta": self.delta,
            "p": self.p,
            "lambda": self.lam,
            "contribution": self.contribution,
        }
        if self.cam_files is not None:
            out["cam_files"] = list(self.cam_files)
        return out


@dataclass
class AttributionReport:
    pair: tuple[str, str]
    overall_similarity: float
    key: str
    nodes: list[NodeRecord]
    most_similar: list[NodeRecord] = field(default_factory=list)
    most_dissimilar: list[NodeRecord] = field(default_factory=list)
    lambda_total: float = 0.0

    def as_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "overall_similarity": self.overall_similarity,
            "rank_key": self.key,
            "lambda_total": self.lambda_total,
            "nodes": [n.as_dict() for n in self.nodes],
            "most_similar": [[n.level, n.index] for n in self.most_similar],
            "most_dissimilar": [[n.level, n.index] for n in self.most_dissimilar],
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _sort_key(key):
    if key == "reliability":
        return lambda n: (-n.p, n.level, n.index)
    if key == "node_value":
        return lambda n: (n.delta, n.level, n.index)
    if key == "contribution":
        return lambda n: (-n.contribution, n.level, n.index)
    raise ValueError(f"unknown rank key {key!r}; choose from {RANK_KEYS}")


def rank_nodes(deltas, gates, sensitivities: SensitivityField, key="reliability_then_value",
               top_n=None, pair=("x", "x'"), overall=None, n_extremes=2) -> AttributionReport:
    """Rank every node of one pair by ``key``.

    ``reliability_then_value`` first keeps the ``top_n`` most reliable nodes
    and then orders them from most to least similar. Level 1 has no gate and
    reports ``p = 1``.
    """
    deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
    n_levels, r = len(deltas), deltas[0].shape[-1]
    total = n_levels * r
    top_n = total if top_n is None else top_n
    if not 0 <= top_n <= total:
        raise ValueError(f"top_n must lie in [0, {total}], got {top_n}")
    all_p = [np.ones(r)] + [np.asarray(p, dtype=np.float64) for p in gates]
    records = [
        NodeRecord(lvl + 1, i, float(deltas[lvl][i]), float(all_p[lvl][i]),
                   float(sensitivities.lambdas[lvl][i]))
        for lvl in range(n_levels) for i in range(r)
    ]
    if key == "reliability_then_value":
        chosen = sorted(records, key=_sort_key("reliability"))[:top_n]
        ranked = sorted(chosen, key=_sort_key("node_value"))
    else:
        ranked = sorted(records, key=_sort_key(key))[:top_n]
    by_value = sorted(ranked, key=_sort_key("node_value"))
    if overall is None:
        overall = float(sensitivities.reconstruct(deltas))
    return AttributionReport(
        pair=tuple(pair),
        overall_similarity=float(overall),
        key=key,
        nodes=ranked,
        most_similar=by_value[:n_extremes],
        most_dissimilar=by_value[::-1][:n_extremes],
        lambda_total=float(sensitivities.total()),
    )


def to_graymap(cam: np.ndarray) -> np.ndarray:
    """Min-max scale to ``0..255``; a constant map becomes mid-gray 128."""
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    if hi == lo:
        return np.full(cam.shape, 128, dtype=np.uint8)
    return np.rint((cam - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)


def write_f32(path, cam: np.ndarray) -> None:
    cam = np.asarray(cam)
    h, w = cam.shape
    with open(path, "wb") as fh:
        fh.write(f"{h} {w}\n".encode("ascii"))
        fh.write(cam.astype("<f4").tobytes(order="C"))


def read_f32(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, _, payload = raw.partition(b"\n")
    h, w = (int(v) for v in header.split())
    return np.frombuffer(payload, dtype="<f4", count=h * w).reshape(h, w)


def export_saliency(cams_x, cams_y, nodes, out_dir, pair_name="pair") -> dict:
    """Write PGM + raw ``.f32`` files for both samples' CAM of each node.

    ``cams_x``/``cams_y`` are per-level ``(r, h, w)`` arrays or CAMStacks,
    indexed from level 1. Returns ``{(level, index): (file_x, file_y)}`` with
    PGM paths relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create saliency directory {out_dir}: {exc}") from exc
    written = {}
    for level, index in nodes:
        names = []
        for tag, stacks in (("a", cams_x), ("b", cams_y)):
            if not 1 <= level <= len(stacks):
                raise ShapeError(f"no level {level} in CAM stacks of depth {len(stacks)}")
            maps = np.asarray(getattr(stacks[level - 1], "maps", stacks[level - 1]))
            if not 0 <= index < maps.shape[0]:
                raise ShapeError(f"node {index} out of range for level {level} with r={maps.shape[0]}")
            stem = f"{pair_name}_L{level}_n{index}_{tag}"
            try:
                write_pgm(out_dir / f"{stem}.pgm", to_graymap(maps[index]))
                write_f32(out_dir / f"{stem}.f32", maps[index])
            except OSError as exc:
                raise OSError(f"failed writing saliency for {out_dir / stem}: {exc}") from exc
            names.append(f"{stem}.pgm")
        written[(level, index)] = tuple(names)
    return written


def attach_cam_files(report: AttributionReport, files: dict) -> AttributionReport:
    nodes = [
        NodeRecord(n.level, n.index, n.delta, n.p, n.lam, files.get((n.level, n.index)))
        for n in report.nodes
    ]
    report.nodes = nodes
    return report
