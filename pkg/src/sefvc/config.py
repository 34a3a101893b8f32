"""Flat ``key = value`` experiment configuration.

Keys map onto the model, discriminator, training and loss-weight
dataclasses. Discriminator keys carry a ``disc_`` prefix, loss weights a
``lambda_`` prefix and toy feature-extractor keys a ``toy_`` prefix::

    # smoke run
    attn_dim = 64
    upsample_rates = 5, 4, 4, 4
    lambda_mel = 60
    max_steps = 200
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .discriminators import DiscriminatorConfig
from .exceptions import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class FeatureConfig:
    kind: str = "toy"  # "toy" or "file"
    n_features: int = 1024
    random_state: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    features: FeatureConfig = field(default_factory=FeatureConfig)


_SECTIONS = (
    ("model", ModelConfig, ""),
    ("train", TrainConfig, ""),
    ("disc", DiscriminatorConfig, "disc_"),
    ("weights", LossWeights, "lambda_"),
    ("features", FeatureConfig, "toy_"),
)


def _key_table() -> dict[str, tuple[str, str, object]]:
    table = {}
    for section, cls, prefix in _SECTIONS:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            name = prefix + f.name
            if section == "features" and f.name == "kind":
                name = "features"
            table[name] = (section, f.name, hints[f.name])
    return table


def _parse_value(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(_parse_value(p.strip(), inner, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_config(text: str) -> ExperimentConfig:
    table = _key_table()
    values: dict[str, dict] = {s: {} for s, _, _ in _SECTIONS}
    seen = set()
    unknown = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in table:
            unknown.append(key)
            continue
        if key in seen:
            raise ConfigError(f"duplicate key: {key}")
        seen.add(key)
        section, name, tp = table[key]
        values[section][name] = _parse_value(raw, tp, key)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if values["features"].get("kind", "toy") not in ("toy", "file"):
        raise ConfigError("features must be 'toy' or 'file'")
    return ExperimentConfig(
        model=ModelConfig(**values["model"]),
        disc=DiscriminatorConfig(**values["disc"]),
        train=TrainConfig(**values["train"]),
        weights=LossWeights(**values["weights"]),
        features=FeatureConfig(**values["features"]),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    inverse = {(s, n): k for k, (s, n, _) in _key_table().items()}
    for section, _cls, _prefix in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{inverse[(section, f.name)]} = {v}")
    return "\n".join(lines) + "\n"
