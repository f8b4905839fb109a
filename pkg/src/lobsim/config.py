"""Declarative run configuration: YAML file plus environment-variable overrides.

Any key can be overridden with LOBSIM_SECTION__KEY=value (double underscore
separates nesting levels), e.g. LOBSIM_SIM__SEED=7.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .evaluation import PredictiveScoreConfig
from .model import ModelConfig
from .sim import POVConfig, SimConfig, Side
from .training import TrainConfig

ENV_PREFIX = "LOBSIM_"


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    message_file: str = ""
    orderbook_file: str = ""
    train_fraction: float = 0.85  # remainder is the validation split
    levels: int = 10
    window: int = 256


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    pov: POVConfig = field(default_factory=POVConfig)
    eval: PredictiveScoreConfig = field(default_factory=PredictiveScoreConfig)
    seed: int = 0

    def apply_seed(self) -> None:
        self.train.seed = self.seed
        self.sim.seed = self.seed
        self.eval.seed = self.seed


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sim": SimConfig,
    "pov": POVConfig,
    "eval": PredictiveScoreConfig,
}


def _coerce(value, target_type):
    if target_type is Side:
        return Side(int(value)) if not isinstance(value, Side) else value
    if target_type is bool and isinstance(value, str):
        return value.lower() in ("1", "true", "yes", "on")
    return target_type(value)


def _build_section(cls, blob: dict, section: str):
    valid = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in blob.items():
        if key not in valid:
            raise ConfigError(f"unknown key {section}.{key}")
        f = next(f for f in fields(cls) if f.name == key)
        target = type(getattr(cls(), key))
        try:
            kwargs[key] = _coerce(value, target)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    return cls(**kwargs)


def _env_overrides() -> dict:
    overrides: dict = {}
    for name, value in os.environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue  # only SECTION__KEY shapes are overrides (LOBSIM_TEST_CACHE etc. are not)
        path = name[len(ENV_PREFIX):].lower().split("__")
        node = overrides
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return overrides


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        blob = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(blob, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    blob = _merge(blob, _env_overrides())
    cfg = RunConfig()
    for section, cls in _SECTIONS.items():
        if section in blob:
            sec = blob.pop(section)
            if not isinstance(sec, dict):
                raise ConfigError(f"section {section} must be a mapping")
            setattr(cfg, section, _build_section(cls, sec, section))
    if "seed" in blob:
        cfg.seed = int(blob.pop("seed"))
    if blob:
        raise ConfigError(f"unknown top-level key(s): {sorted(blob)}")
    cfg.apply_seed()
    cfg.model.window = cfg.data.window
    cfg.model.lob_levels = cfg.data.levels
    return cfg
