"""Flat ``key = value`` configuration files.

Lines starting with ``#`` are comments. Unknown keys are rejected so typos
fail loudly.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .synth import SynthSpec


@dataclass(frozen=True)
class Config:
    levels: tuple[tuple[int, int, int], ...] = ((16, 8, 8), (24, 6, 6), (32, 4, 4))
    r: int = 32
    k: int = 8
    gamma: float = 0.95
    loss: str = "margin"
    lr: float = 1e-3
    lr_inference: float = 0.5
    weight_decay: float = 1e-4
    batch_size: int = 32
    classes_per_batch: int = 4
    margin_alpha: float = 0.2
    margin_beta: float = 1.2
    pa_scale: float = 16.0
    pa_beta: float = 2.0
    pa_tau: float = 0.2
    seed: int = 0
    epochs: int = 30
    # Synthetic benchmark.
    n_classes: int = 16
    samples_per_class: int = 40
    noise: tuple[float, ...] = (0.8, 0.8, 0.55)
    saturation: tuple[float, ...] = (0.0, 0.0, 0.2)
    # Objective split.
    level_weights: tuple[float, ...] = ()
    use_level_loss: bool = True
    use_overall_loss: bool = True
    top_level_only: bool = False
    # Evaluation.
    slice_rows: int = 64
    k_list: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        if not self.levels or any(len(lvl) != 3 or min(lvl) < 1 for lvl in self.levels):
            raise ConfigError(f"levels must be nonempty (c, h, w) triples of positive ints, got {self.levels}")
        if self.r < 1:
            raise ConfigError(f"r must be >= 1, got {self.r}")
        if not 1 <= self.k <= self.r:
            raise ConfigError(f"k must lie in [1, r={self.r}], got {self.k}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.loss not in ("margin", "proxy_anchor"):
            raise ConfigError(f"loss must be 'margin' or 'proxy_anchor', got {self.loss!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.classes_per_batch < 1 or self.batch_size % self.classes_per_batch:
            raise ConfigError(
                f"batch_size {self.batch_size} must be a multiple of classes_per_batch {self.classes_per_batch}"
            )
        if self.margin_alpha <= 0:
            raise ConfigError("margin_alpha must be > 0")
        if self.pa_scale <= 0:
            raise ConfigError("pa_scale must be > 0")
        if self.level_weights and len(self.level_weights) != len(self.levels):
            raise ConfigError("level_weights needs one weight per level")
        if self.slice_rows < 1:
            raise ConfigError("slice_rows must be >= 1")
        if any(kk < 1 for kk in self.k_list) or list(self.k_list) != sorted(self.k_list):
            raise ConfigError(f"k_list must be positive and ascending, got {self.k_list}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def weights(self) -> tuple[float, ...]:
        return self.level_weights or (1.0,) * self.n_levels

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(levels=self.levels, n_classes=self.n_classes,
                         samples_per_class=self.samples_per_class,
                         noise=self.noise, saturation=self.saturation)

    def with_(self, **changes) -> "Config":
        return replace(self, **changes)

    def digest(self) -> str:
        """Short stable hash used to tag CSV rows."""
        text = dump_config(self)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def _parse_levels(text: str):
    try:
        return tuple(tuple(int(v) for v in item.strip().lower().split("x"))
                     for item in text.split(",") if item.strip())
    except ValueError as exc:
        raise ConfigError(f"levels must look like '16x8x8,24x6x6', got {text!r}") from exc


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _converter(name: str, default):
    if name == "levels":
        return _parse_levels
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, str):
        return str
    if name in ("k_list",):
        return lambda s: tuple(int(v) for v in s.split(",") if v.strip())
    return lambda s: tuple(float(v) for v in s.split(",") if v.strip())


def parse_config(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    known = {f.name: getattr(base, f.name) for f in fields(Config)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            changes[key] = _converter(key, known[key])(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return replace(base, **changes)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _format(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join("x".join(str(v) for v in item) for item in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: Config) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(cfg).items())
