"""Ablation table and hyperparameter sweeps over seeds.

A variant is a set of config overrides plus the distance used at retrieval
time. Variants whose overrides give the same training config share one
training run per seed.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .errors import ConfigError
from .model import FeatureCache, prepare
from .retrieval import DISTANCES, evaluate
from .synth import zero_shot_split
from .training import fit


@dataclass(frozen=True)
class AblationVariant:
    name: str
    overrides: dict = field(default_factory=dict)
    distance: str = "full"

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ConfigError(f"variant {self.name!r}: unknown distance {self.distance!r}")

    def config(self, base: Config) -> Config:
        return base.with_(**self.overrides)


VARIANTS = {
    "baseline_top_level": AblationVariant(
        "baseline_top_level", {"top_level_only": True, "use_overall_loss": False}, "top"),
    "multi_layer": AblationVariant("multi_layer", {"use_overall_loss": False}, "multi"),
    "multi_layer_reliability": AblationVariant("multi_layer_reliability", {}, "reliability"),
    "concat": AblationVariant("concat", {"use_overall_loss": False}, "concat"),
    "full_avsl": AblationVariant("full_avsl", {}, "full"),
}


@dataclass
class AblationRow:
    name: str
    ks: list[int]
    per_seed: np.ndarray  # (n_seeds, len(ks)) recalls in [0, 1]
    seeds: list[int]
    config_hash: str

    @property
    def mean(self) -> np.ndarray:
        return self.per_seed.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.per_seed.std(axis=0)


@dataclass
class AblationTable:
    rows: list[AblationRow]
    label: str = "variant"

    def row(self, name) -> AblationRow:
        for r in self.rows:
            if r.name == str(name):
                return r
        raise KeyError(name)

    def recall(self, name, k=1) -> float:
        """Mean Recall@k of a row in percentage points."""
        r = self.row(name)
        return 100.0 * float(r.mean[r.ks.index(k)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([self.label, "k", "recall_mean", "recall_std", "n_seeds", "seeds", "config_hash"])
        for r in self.rows:
            for j, k in enumerate(r.ks):
                writer.writerow([r.name, k, f"{r.mean[j]:.6f}", f"{r.std[j]:.6f}", len(r.seeds),
                                 " ".join(map(str, r.seeds)), r.config_hash])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def table(self) -> str:
        ks = self.rows[0].ks if self.rows else []
        width = max([len(self.label)] + [len(r.name) for r in self.rows])
        head = f"{self.label:<{width}}  " + "  ".join(f"{'R@' + str(k):>13}" for k in ks)
        lines = [head]
        for r in self.rows:
            cells = "  ".join(f"{100 * m:6.2f} ± {100 * s:4.2f}" for m, s in zip(r.mean, r.std))
            lines.append(f"{r.name:<{width}}  {cells}")
        return "\n".join(lines)


def _seed_data(cfg: Config, seed: int, dataset):
    if dataset is None:
        train, test = zero_shot_split(cfg.with_(seed=seed).synth_spec(), seed)
        return prepare(train), prepare(test)
    train, test = dataset
    to_cache = lambda d: d if isinstance(d, FeatureCache) else prepare(d)
    return to_cache(train), to_cache(test)


class RunCache:
    """Trains each distinct config once per seed and caches the result."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.data: dict = {}
        self.models: dict = {}

    def recall(self, cfg: Config, seed: int, kind: str, ks) -> list[float]:
        c = cfg.with_(seed=seed)
        if seed not in self.data:
            self.data[seed] = _seed_data(c, seed, self.dataset)
        train, test = self.data[seed]
        key = c.digest()
        if key not in self.models:
            model = fit(train, c).model()
            self.models[key] = (model, model.encode(test))
        model, enc = self.models[key]
        return evaluate(model, enc, ks, kind, c.slice_rows).recalls


def _resolve(variants):
    out = []
    for v in variants:
        if isinstance(v, AblationVariant):
            out.append(v)
        elif v in VARIANTS:
            out.append(VARIANTS[v])
        else:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    return out


def run_ablation(cfg: Config, variants=None, seeds=(0, 1, 2), ks=None, dataset=None,
                 runner: RunCache | None = None) -> AblationTable:
    """Mean and std of Recall@K per variant over ``seeds``.

    ``dataset`` is ``None`` for the synthetic benchmark regenerated per seed,
    or a fixed ``(train, test)`` pair of pyramid lists or feature caches.
    """
    variants = _resolve(list(VARIANTS) if variants is None else variants)
    if not variants:
        raise ConfigError("run_ablation needs at least one variant")
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("run_ablation needs at least one seed")
    ks = list(cfg.k_list if ks is None else ks)
    runner = runner or RunCache(dataset)
    rows = []
    for v in variants:
        c = v.config(cfg)
        per_seed = np.array([runner.recall(c, s, v.distance, ks) for s in seeds])
        rows.append(AblationRow(v.name, ks, per_seed, seeds, c.digest()))
    return AblationTable(rows)


def default_sweep_values(cfg: Config, param: str) -> list:
    if param == "k":
        return [2 ** i for i in range(int(np.log2(cfg.r)) + 1)]
    if param == "r":
        return [32, 64, 128]
    raise ConfigError(f"cannot sweep {param!r}; choose 'k' or 'r'")


def sweep(cfg: Config, param: str = "k", values=None, seeds=(0, 1, 2), ks=None, distance="full",
          dataset=None, runner: RunCache | None = None) -> AblationTable:
    """Recall@K of one variant as ``param`` takes each of ``values``."""
    values = default_sweep_values(cfg, param) if values is None else list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    ks = list(cfg.k_list if ks is None else ks)
    runner = runner or RunCache(dataset)
    rows = []
    for value in values:
        changes = {param: value}
        if param == "r" and cfg.k > value:
            changes["k"] = value
        c = cfg.with_(**changes)
        per_seed = np.array([runner.recall(c, s, distance, ks) for s in seeds])
        rows.append(AblationRow(str(value), ks, per_seed, list(seeds), c.digest()))
    return AblationTable(rows, label=param)
