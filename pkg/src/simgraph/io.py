"""Binary formats: AVSF feature files, AVSE edge stores, AVSP inference
parameters, and checkpoints that concatenate them with the projection blob.

All integers and floats are little-endian. Readers report the byte offset of
the first problem they find.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    ParseError,
    TruncationError,
    VersionError,
)
from .features import FeaturePyramid
from .graph import EdgeStore
from .inference import InferenceParams

FEATURE_MAGIC = b"AVSF"
EDGE_MAGIC = b"AVSE"
PARAM_MAGIC = b"AVSP"
TENSOR_MAGIC = b"AVST"
VERSION = 1

# Guards against absurd headers before any allocation happens.
MAX_LEVELS = 64
MAX_DIM = 1 << 20
MAX_ELEMENTS = 1 << 28


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} available", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def u32(self, what: str) -> int:
        return self.unpack("<I", what)[0]

    def magic(self, expected: bytes):
        start = self.pos
        got = self.take(len(expected), "magic")
        if got != expected:
            raise BadMagicError(f"bad magic {got!r}, expected {expected!r}", start)

    def version(self):
        start = self.pos
        v = self.u32("version")
        if v != VERSION:
            raise VersionError(f"unsupported version {v}", start)

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype, count=count)


def _dim(reader: _Reader, what: str, limit: int = MAX_DIM) -> int:
    start = reader.pos
    v = reader.u32(what)
    if v < 1 or v > limit:
        raise DimensionOverflowError(f"{what}={v} outside [1, {limit}]", start)
    return v


# -- AVSF ---------------------------------------------------------------------

def encode_pyramid(pyramid: FeaturePyramid) -> bytes:
    shapes = pyramid.shapes
    parts = [FEATURE_MAGIC, struct.pack("<II", VERSION, len(shapes))]
    for c, h, w in shapes:
        parts.append(struct.pack("<III", c, h, w))
    for arr in pyramid.arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", int(pyramid.label)))
    return b"".join(parts)


def decode_pyramid(buf: bytes, sample_id: str = "", label: int | None = None) -> FeaturePyramid:
    rd = _Reader(buf)
    rd.magic(FEATURE_MAGIC)
    rd.version()
    n_levels = _dim(rd, "level count", MAX_LEVELS)
    shapes = []
    total = 0
    for lvl in range(n_levels):
        start = rd.pos
        dims = tuple(_dim(rd, f"level {lvl + 1} {name}") for name in "chw")
        count = dims[0] * dims[1] * dims[2]
        total += count
        if total > MAX_ELEMENTS:
            raise DimensionOverflowError(f"payload of {total} floats exceeds limit", start)
        shapes.append(dims)
    need = total * 4 + 4
    if rd.pos + need > len(buf):
        raise TruncationError(
            f"header declares {need} payload bytes, {len(buf) - rd.pos} present", rd.pos
        )
    arrays = [rd.array("<f4", int(np.prod(s)), "payload").reshape(s) for s in shapes]
    stored_label = rd.u32("label")
    if rd.pos != len(buf):
        raise ParseError(f"{len(buf) - rd.pos} trailing bytes", rd.pos)
    return FeaturePyramid.from_arrays(arrays, sample_id, stored_label if label is None else label)


def write_pyramid_file(path, pyramid: FeaturePyramid) -> None:
    Path(path).write_bytes(encode_pyramid(pyramid))


def read_pyramid_file(path, sample_id: str | None = None, label: int | None = None) -> FeaturePyramid:
    path = Path(path)
    return decode_pyramid(path.read_bytes(), path.stem if sample_id is None else sample_id, label)


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: Path
    label: int


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for e in entries:
            rel = Path(e.path)
            try:
                rel = rel.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([e.sample_id, rel.as_posix(), e.label])


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'sample_id,path,label', got {row}")
            sid, rel, label = (c.strip() for c in row)
            entries.append(ManifestEntry(sid, path.parent / rel, int(label)))
    return entries


def load_manifest(path) -> list[FeaturePyramid]:
    """Pyramids listed in a manifest; the manifest label wins over the stored one."""
    return [read_pyramid_file(e.path, e.sample_id, e.label) for e in read_manifest(path)]


# -- AVSE ---------------------------------------------------------------------

def encode_edges(store: EdgeStore) -> bytes:
    head = EDGE_MAGIC + struct.pack("<IIIdQ", VERSION, store.n_levels, store.r, store.gamma,
                                    store.update_count)
    return head + b"".join(np.ascontiguousarray(m, dtype="<f8").tobytes() for m in store.matrices)


def _decode_edges(rd: _Reader) -> EdgeStore:
    rd.magic(EDGE_MAGIC)
    rd.version()
    n_levels = _dim(rd, "level count", MAX_LEVELS)
    # A single-level store has no matrices and records r = 0.
    r = rd.u32("r") if n_levels == 1 else _dim(rd, "r", 1 << 14)
    gamma, count = rd.unpack("<dQ", "gamma/update_count")
    mats = [rd.array("<f8", r * r, f"edge matrix {i + 2}").reshape(r, r).copy()
            for i in range(n_levels - 1)]
    if n_levels == 1:
        return EdgeStore([], gamma, count, 1)
    return EdgeStore(mats, gamma, count, n_levels)


def decode_edges(buf: bytes) -> EdgeStore:
    return _decode_edges(_Reader(buf))


def write_edges(path, store: EdgeStore) -> None:
    Path(path).write_bytes(encode_edges(store))


def read_edges(path) -> EdgeStore:
    return decode_edges(Path(path).read_bytes())


# -- AVSP ---------------------------------------------------------------------

def encode_params(params: InferenceParams) -> bytes:
    head = PARAM_MAGIC + struct.pack("<IIII", VERSION, params.n_levels, params.r, params.k)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() + np.ascontiguousarray(b, dtype="<f8").tobytes()
        for a, b in zip(params.alpha, params.beta)
    )
    return head + body


def _decode_params(rd: _Reader) -> InferenceParams:
    rd.magic(PARAM_MAGIC)
    rd.version()
    n_levels = _dim(rd, "level count", MAX_LEVELS)
    r = _dim(rd, "r", 1 << 14)
    k = rd.u32("k")
    alpha, beta = [], []
    for lvl in range(2, n_levels + 1):
        alpha.append(rd.array("<f8", r, f"alpha level {lvl}"))
        beta.append(rd.array("<f8", r, f"beta level {lvl}"))
    shape = (n_levels - 1, r)
    return InferenceParams(np.array(alpha).reshape(shape), np.array(beta).reshape(shape), k)


def decode_params(buf: bytes) -> InferenceParams:
    return _decode_params(_Reader(buf))


def write_params(path, params: InferenceParams) -> None:
    Path(path).write_bytes(encode_params(params))


def read_params(path) -> InferenceParams:
    return decode_params(Path(path).read_bytes())


# -- tensor blob and checkpoint -----------------------------------------------

def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [TENSOR_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _decode_tensors(rd: _Reader) -> dict[str, np.ndarray]:
    rd.magic(TENSOR_MAGIC)
    rd.version()
    count = rd.u32("tensor count")
    out = {}
    for _ in range(count):
        (n,) = rd.unpack("<H", "name length")
        name = rd.take(n, "name").decode("utf-8")
        start = rd.pos
        ndim = rd.u32("ndim")
        if ndim > 8:
            raise DimensionOverflowError(f"tensor {name!r} has {ndim} dims", start)
        shape = rd.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape)) if shape else 1
        if size > MAX_ELEMENTS:
            raise DimensionOverflowError(f"tensor {name!r} too large: {shape}", start)
        out[name] = rd.array("<f8", size, f"tensor {name!r}").reshape(shape).copy()
    return out


@dataclass
class Checkpoint:
    params: InferenceParams
    edges: EdgeStore
    tensors: dict[str, np.ndarray]
    step: int = 0


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    return (encode_params(ckpt.params) + encode_edges(ckpt.edges)
            + encode_tensors(ckpt.tensors) + struct.pack("<Q", ckpt.step))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    params = _decode_params(rd)
    edges = _decode_edges(rd)
    tensors = _decode_tensors(rd)
    (step,) = rd.unpack("<Q", "step counter")
    if rd.pos != len(buf):
        raise ParseError(f"{len(buf) - rd.pos} trailing bytes", rd.pos)
    return Checkpoint(params, edges, tensors, step)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
