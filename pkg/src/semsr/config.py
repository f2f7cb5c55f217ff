"""Run configuration: one YAML file with named blocks. Unknown keys are errors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .autoencoder import AutoencoderConfig
from .degradation import DatasetConfig
from .denoiser import DenoiserConfig
from .sampler import SamplerConfig
from .semantic import ExtractorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass
class AutoencoderTraining:
    steps: int = 400
    lr: float = 3e-3
    batch_size: int = 8
    checkpoint: str | None = None  # reuse a pretrained autoencoder instead of training one


@dataclass
class SourcesConfig:
    lsdir: str | None = None
    ugc_pairs: str | None = None
    ugc_hr: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sources: SourcesConfig = field(default_factory=SourcesConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    autoencoder_training: AutoencoderTraining = field(default_factory=AutoencoderTraining)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    optimizer: TrainConfig = field(default_factory=TrainConfig)
    sampler: dict = field(default_factory=dict)  # SamplerConfig overrides applied on top of a preset

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        kwargs[k] = _build(sub, v, f"{where}.{k}") if sub is not None else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


from .degradation import DegradationRecipe  # noqa: E402
from .semantic import TrunkConfig  # noqa: E402

_NESTED = {
    (RunConfig, "schedule"): ScheduleConfig,
    (RunConfig, "sources"): SourcesConfig,
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "autoencoder"): AutoencoderConfig,
    (RunConfig, "autoencoder_training"): AutoencoderTraining,
    (RunConfig, "extractor"): ExtractorConfig,
    (RunConfig, "denoiser"): DenoiserConfig,
    (RunConfig, "optimizer"): TrainConfig,
    (DatasetConfig, "synthetic_recipe"): DegradationRecipe,
    (DatasetConfig, "wild_recipe"): DegradationRecipe,
    (ExtractorConfig, "trunk"): TrunkConfig,
}


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "config")
    sampler_fields = {f.name for f in dataclasses.fields(SamplerConfig)}
    unknown = set(cfg.sampler) - sampler_fields
    if unknown:
        raise ConfigError(f"config.sampler: unknown keys {sorted(unknown)}")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def desk_config(**overrides) -> RunConfig:
    """Small configuration that trains on a laptop CPU in minutes."""
    data = {
        "dataset": {"patch_size": 64, "stride": 32},
        "optimizer": {"steps": 2000},
        "sampler": {"num_steps": 20},
    }
    for k, v in overrides.items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    return config_from_dict(data)
