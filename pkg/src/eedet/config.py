"""Run configuration: one strict JSON document shared by every command."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cost import LatencyModel
from .data import SceneSpec
from .detection import LossWeights
from .model import BackboneConfig, EEBranchConfig, HeadConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "runs/data"
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    scene: SceneSpec = field(default_factory=SceneSpec)


@dataclass
class QatConfig:
    epochs: int = 5
    initial_lr: float = 1e-4
    bits: int = 8


@dataclass
class HpoConfig:
    n_trials: int = 100
    stage: int = 4
    epochs: int = 15
    space: dict | None = None  # SearchSpace.to_dict(); None = default over the stage's layers


@dataclass
class SweepConfig:
    taus: list | None = None
    map_baseline: float | None = None


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(width_multiplier=0.5))
    ee: EEBranchConfig | None = field(default_factory=lambda: EEBranchConfig(attach_layer=4))
    heads: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, initial_lr=1e-3))
    loss: LossWeights = field(default_factory=LossWeights)
    qat: QatConfig = field(default_factory=QatConfig)
    hpo: HpoConfig = field(default_factory=HpoConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    latency: LatencyModel = field(default_factory=LatencyModel)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# nested dataclass fields, by (owner, field name)
_NESTED = {
    (RunConfig, "data"): DataConfig, (RunConfig, "backbone"): BackboneConfig, (RunConfig, "ee"): EEBranchConfig,
    (RunConfig, "heads"): HeadConfig, (RunConfig, "train"): TrainConfig, (RunConfig, "loss"): LossWeights,
    (RunConfig, "qat"): QatConfig, (RunConfig, "hpo"): HpoConfig, (RunConfig, "sweep"): SweepConfig,
    (RunConfig, "latency"): LatencyModel, (DataConfig, "scene"): SceneSpec,
}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        if sub is not None and v is not None:
            v = _build(sub, v, f"{path}.{k}" if path else k)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def config_from_dict(d: dict) -> RunConfig:
    cfg = _build(RunConfig, d, "")
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(d)
