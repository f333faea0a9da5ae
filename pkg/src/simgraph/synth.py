"""Synthetic feature pyramids standing in for a CNN backbone.

Every class owns a handful of concepts. A concept has a location on the
unit square shared by all levels and its own non-negative channel loading
at each level, rendered as a Gaussian blob whose width is fixed in pixels,
so it covers more of the image on the coarser upper levels. Samples add
location jitter and Gaussian noise to the class prototype. With probability
``saturation[l]`` a sample's level ``l`` is pinned to a constant ceiling,
wiping out its class content and leaving a spatially flat activation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .features import FeaturePyramid


@dataclass(frozen=True)
class SynthSpec:
    levels: tuple[tuple[int, int, int], ...] = ((16, 8, 8), (24, 6, 6), (32, 4, 4))
    n_classes: int = 16
    samples_per_class: int = 40
    noise: tuple[float, ...] = (0.8, 0.8, 0.55)
    saturation: tuple[float, ...] = (0.0, 0.0, 0.2)
    concepts_per_class: int = 3
    channel_density: float = 0.3
    blob_width: float = 0.8
    amplitude: float = 1.0
    baseline: float = 1.0
    saturation_ceiling: float = 0.5
    jitter: float = 0.05
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        levels = tuple(tuple(int(v) for v in lvl) for lvl in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ConfigError("synthetic spec needs at least one level")
        for lvl in levels:
            if len(lvl) != 3 or min(lvl) < 1:
                raise ConfigError(f"level dims must be three positive ints, got {lvl}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.concepts_per_class < 1:
            raise ConfigError("concepts_per_class must be >= 1")
        for name in ("noise", "saturation"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) == 1:
                vals = vals * len(levels)
            if len(vals) != len(levels):
                raise ConfigError(f"{name} needs one value per level ({len(levels)}), got {len(vals)}")
            if any(v < 0 for v in vals):
                raise ConfigError(f"{name} values must be non-negative")
            object.__setattr__(self, name, vals)
        if any(p > 1 for p in self.saturation):
            raise ConfigError("saturation probabilities must be <= 1")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _class_prototype(spec: SynthSpec, seed: int, label: int):
    rng = np.random.default_rng([seed, 0, label])
    locs = rng.uniform(0.15, 0.85, size=(spec.concepts_per_class, 2))
    loadings = []
    for c, _, _ in spec.levels:
        mask = rng.random((spec.concepts_per_class, c)) < spec.channel_density
        # Guarantee each concept touches at least one channel.
        mask[np.arange(spec.concepts_per_class), rng.integers(0, c, spec.concepts_per_class)] = True
        loadings.append(mask * rng.uniform(0.5, 1.5, size=mask.shape))
    return locs, loadings


def _render(locs, loading, h, w, width, amplitude):
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    out = np.zeros((loading.shape[1], h, w))
    for (u, v), load in zip(locs, loading):
        dy = (ys - u) * h / width
        dx = (xs - v) * w / width
        blob = np.exp(-0.5 * (dy[:, None] ** 2 + dx[None, :] ** 2))
        out += load[:, None, None] * blob[None]
    return amplitude * out


def synthesize_pyramid(spec: SynthSpec, seed: int, label: int = 0, index: int = 0,
                       sample_id: str | None = None) -> FeaturePyramid:
    if not 0 <= label < spec.n_classes:
        raise ConfigError(f"label {label} outside [0, {spec.n_classes})")
    locs, loadings = _class_prototype(spec, seed, label)
    rng = np.random.default_rng([seed, 1, label, index])
    jittered = np.clip(locs + spec.jitter * rng.standard_normal(locs.shape), 0.0, 1.0)
    arrays = []
    for (c, h, w), load, sigma, p_sat in zip(spec.levels, loadings, spec.noise, spec.saturation):
        z = spec.baseline + _render(jittered, load, h, w, spec.blob_width, spec.amplitude)
        z = z + sigma * rng.standard_normal((c, h, w))
        z = np.maximum(z, 0.0)
        if p_sat > 0 and rng.random() < p_sat:
            z = np.full_like(z, spec.saturation_ceiling * spec.baseline)
        arrays.append(z.astype(np.float32))
    sid = f"c{label:03d}_s{index:04d}" if sample_id is None else sample_id
    return FeaturePyramid.from_arrays(arrays, sid, label)


def synthesize_dataset(spec: SynthSpec, seed: int, classes=None) -> list[FeaturePyramid]:
    """All samples of ``classes`` (default: every class), class-major order."""
    classes = range(spec.n_classes) if classes is None else classes
    return [
        synthesize_pyramid(spec, seed, y, i)
        for y in classes for i in range(spec.samples_per_class)
    ]


def zero_shot_split(spec: SynthSpec, seed: int):
    """First half of the classes for training, the rest for evaluation."""
    n_train = spec.n_classes // 2
    if n_train < 1 or spec.n_classes - n_train < 1:
        raise ConfigError("zero-shot split needs at least two classes")
    train = synthesize_dataset(spec, seed, range(n_train))
    test = synthesize_dataset(spec, seed, range(n_train, spec.n_classes))
    return train, test
