"""Run configuration: one structured YAML file drives every command.

Nested dataclasses define the schema; unknown keys are rejected with the
offending dotted path. Command-line overrides use the same dotted paths.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path

import yaml

from .corpus import CorpusSpec
from .exceptions import ConfigurationError
from .features import FeatureConfig
from .metrics import PsdsParams, default_thresholds, psds_presets
from .model import EncoderSpec, ModelConfig
from .schedules import Stage, StageConfig, stage_config_defaults


@dataclass
class EvalConfig:
    n_thresholds: int = 50
    median_len: int = 7
    collar: float = 0.2
    psds1: PsdsParams = field(default_factory=lambda: psds_presets()[0])
    psds2: PsdsParams = field(default_factory=lambda: psds_presets()[1])

    def __post_init__(self):
        ths = default_thresholds(self.n_thresholds)
        self.psds1 = dataclasses.replace(self.psds1, thresholds=ths)
        self.psds2 = dataclasses.replace(self.psds2, thresholds=ths)


def _desk_frozen() -> StageConfig:
    cfg = stage_config_defaults(Stage.FROZEN, "frame")
    cfg.total_epochs = 10
    cfg.r_eps = 4
    return cfg


def _desk_finetune() -> StageConfig:
    cfg = stage_config_defaults(Stage.FINETUNE, "frame")
    cfg.total_epochs = 12
    cfg.r_eps = 3
    return cfg


@dataclass
class BatchSizes:
    strong_real: int = 4
    strong_synth: int = 4
    weak: int = 8
    unlabeled: int = 8


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/toy"
    corpus_dir: str = "runs/toy/corpus"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch: BatchSizes = field(default_factory=BatchSizes)
    frozen: StageConfig = field(default_factory=_desk_frozen)
    finetune: StageConfig = field(default_factory=_desk_finetune)
    eval: EvalConfig = field(default_factory=EvalConfig)
    encoder_warmup_epochs: int = 0
    encoder_warmup_lr: float = 1e-3


def _to_plain(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _merge_into(default_obj, data, path=""):
    """Rebuild a dataclass instance with `data` merged over its current values."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping")
    known = {f.name for f in fields(default_obj)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in fields(default_obj):
        current = getattr(default_obj, f.name)
        sub_path = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], current, sub_path)
        else:
            kwargs[f.name] = current
    return type(default_obj)(**kwargs)


def _coerce(value, default, path):
    # coerce by the type of the current value so string annotations need no resolver
    if value is None:
        return None
    if is_dataclass(default) and not isinstance(default, type):
        return _merge_into(default, value, path)
    if isinstance(default, Enum):
        return type(default)(value)
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigurationError(f"{path}: expected an integer")
        if isinstance(value, (int, float)):
            return int(value)
        raise ConfigurationError(f"{path}: expected an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigurationError(f"{path}: expected a number")
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _merge_into(RunConfig(), data)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted-path overrides like finetune.total_epochs=12."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"unknown config path {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigurationError(f"unknown config path {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
