"""Run configuration shared by the trainer and the command line.

A configuration file is JSON with optional sections ``data``, ``model``,
``train``, ``loss`` and ``sample``. Values resolve as built-in defaults, then
the file, then ``section.key=value`` overrides; unknown keys are errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .losses import LossWeights
from .trainer import TrainConfig

CONFIG_DIR_ENV = "DUOMOTION_CONFIG_DIR"


@dataclass(frozen=True)
class DataConfig:
    n_clips: int = 500
    length: int = 64
    seed: int = 0
    skeleton: str = "smpl22"
    train_ratio: float = 0.8
    val_ratio: float = 0.05
    test_ratio: float = 0.15


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    max_len: int = 300

    def denoiser(self, state_dim: int, labels) -> DenoiserConfig:
        return DenoiserConfig(state_dim=state_dim, labels=tuple(labels), **asdict(self))


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "sample": SamplerConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sample: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _coerce(cls, key: str, value):
    types = {f.name: f.type for f in fields(cls)}
    kind = types[key] if isinstance(types[key], str) else types[key].__name__
    if kind == "int":
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"{cls.__name__}.{key} expects an integer, got {value!r}")
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "str":
        return str(value)
    return value


def apply(config: RunConfig, updates: dict) -> RunConfig:
    """Return ``config`` with nested ``{section: {key: value}}`` updates applied."""
    out = config
    for section, values in updates.items():
        if section not in SECTIONS:
            raise KeyError(f"unknown config section {section!r}; known: {sorted(SECTIONS)}")
        if not isinstance(values, dict):
            raise ValueError(f"config section {section!r} must be an object")
        cls = SECTIONS[section]
        known = {f.name for f in fields(cls)}
        bad = set(values) - known
        if bad:
            raise KeyError(f"unknown key(s) {sorted(bad)} in section {section!r}; known: {sorted(known)}")
        cur = getattr(out, section)
        new = replace(cur, **{k: _coerce(cls, k, v) for k, v in values.items()})
        out = replace(out, **{section: new})
    return out


def parse_override(text: str) -> dict:
    """``"train.epochs=5"`` -> ``{"train": {"epochs": 5}}``; values parse as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    if key.count(".") != 1:
        raise ValueError(f"override key {key!r} must be section.key")
    section, name = key.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {section: {name: value}}


def default_config_path() -> Path | None:
    base = os.environ.get(CONFIG_DIR_ENV)
    if not base:
        return None
    path = Path(base) / "config.json"
    return path if path.exists() else None


def resolve(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (or the default config directory), then overrides."""
    config = RunConfig()
    path = Path(path) if path is not None else default_config_path()
    if path is not None:
        config = apply(config, json.loads(Path(path).read_text()))
    merged: dict = {}
    for text in overrides:  # validate the combined result, not each step
        for section, values in parse_override(text).items():
            merged.setdefault(section, {}).update(values)
    return apply(config, merged)


def save(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
