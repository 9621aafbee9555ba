"""Versioned JSON pipeline configuration.

Every section is a dataclass; unknown keys anywhere are rejected so a
typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .similarity import METRICS, REPRESENTATIONS
from .weighting import parse_scheme

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UniverseConfig:
    num_clusters: int = 10
    dim: int = 16
    sigma: float = 0.6


@dataclass(frozen=True)
class TargetsConfig:
    count: int = 3
    n_clusters: int = 6
    n_classes: int = 3
    # explicit partitions (lists of cluster lists) override count/n_clusters/n_classes
    specs: list | None = None


@dataclass(frozen=True)
class SourcesConfig:
    overlaps: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    partition: str = "singletons"
    hidden_dims: list = field(default_factory=lambda: [[8], [16], [32], [64]])
    n_train: int = 400
    accuracy_floor: float = 0.9
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    # explicit source partitions, shared by every target; overrides overlaps
    specs: list | None = None


@dataclass(frozen=True)
class DataConfig:
    n_total: int = 600
    labeled_fraction: float = 0.2
    probe_size: int | None = None
    n_test: int = 5000


@dataclass(frozen=True)
class TargetTrainingConfig:
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    hidden_dims: list = field(default_factory=lambda: [16])
    activation: str = "tanh"
    batch_ratio: list = field(default_factory=lambda: [1, 1])


@dataclass(frozen=True)
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    targets: TargetsConfig = field(default_factory=TargetsConfig)
    sources: SourcesConfig = field(default_factory=SourcesConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TargetTrainingConfig = field(default_factory=TargetTrainingConfig)
    metric: str = "parc"
    representation: str = "feature"
    p: float = 12.0
    temperature: float = 1.0
    top_k: int | None = None
    schemes: list = field(default_factory=lambda: ["nearest", "equal", "weighted:p=12", "inverse", "random"])
    lam: float = 0.8
    single_source: bool = True
    supervised_baseline: bool = True
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; this build reads {SCHEMA_VERSION}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"representation must be one of {REPRESENTATIONS}, got {self.representation!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.data.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must lie in (0, 1], got {self.data.labeled_fraction}")
        if self.p < 0:
            raise ConfigError(f"p must be nonnegative, got {self.p}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not self.schemes:
            raise ConfigError("schemes must list at least one weighting scheme")
        try:
            for s in self.schemes:
                parse_scheme(s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.sources.partition not in ("singletons", "random"):
            raise ConfigError(f"sources.partition must be 'singletons' or 'random', got {self.sources.partition!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        """SHA-256 of the canonical JSON form, ignoring ``output_dir``."""
        d = self.to_dict()
        d.pop("output_dir")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_SECTIONS = {
    (PipelineConfig, "universe"): UniverseConfig,
    (PipelineConfig, "targets"): TargetsConfig,
    (PipelineConfig, "sources"): SourcesConfig,
    (PipelineConfig, "data"): DataConfig,
    (PipelineConfig, "training"): TargetTrainingConfig,
}


def config_from_dict(data):
    return _build(PipelineConfig, data, "")


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
