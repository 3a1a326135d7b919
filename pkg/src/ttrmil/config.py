"""Flat run configuration, loadable from JSON or TOML.

One file, one namespace of scalar keys.  Unknown keys are rejected so a typo
cannot silently fall back to a default.  The canonical JSON form (sorted keys,
fixed separators) feeds the config hash that commands write next to their
outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .errors import ConfigError

__all__ = ["RunConfig", "load_config", "config_hash"]


@dataclass(frozen=True)
class RunConfig:
    T: float = 1.65
    top_k: int = 10
    m_percent: float = 20.0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    dropout: float = 0.25
    min_epoch_default: int = 40
    seed: int = 0
    attention_input: str = "embeddings"
    hidden_dim: int = 32
    lambda_inst: float = 0.3
    k_inst: int = 8
    fast_epochs: int = 30
    slow_epochs: int = 60
    batch_size: int | None = None  # None = full-batch Cox risk sets

    def __post_init__(self):
        checks = [
            (self.T > 0, "T must be positive"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (0 < self.m_percent <= 40, "m_percent must be in (0, 40]"),
            (self.lr > 0, "lr must be positive"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (self.min_epoch_default >= 0, "min_epoch_default must be >= 0"),
            (self.attention_input in ("embeddings", "risks"),
             "attention_input must be 'embeddings' or 'risks'"),
            (self.hidden_dim >= 1, "hidden_dim must be >= 1"),
            (self.lambda_inst >= 0, "lambda_inst must be >= 0"),
            (self.k_inst >= 1, "k_inst must be >= 1"),
            (self.fast_epochs >= 1, "fast_epochs must be >= 1"),
            (self.slow_epochs >= 1, "slow_epochs must be >= 1"),
            (self.batch_size is None or self.batch_size >= 2,
             "batch_size must be None or >= 2"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a flat JSON or TOML mapping; apply overrides on top."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        data = tomllib.loads(text)
    elif path.suffix == ".json":
        data = json.loads(text)
    else:
        raise ConfigError(f"config must be .json or .toml, got {path.suffix!r}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data.update(overrides or {})
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in data.items():
        if not isinstance(value, (int, float, str, type(None), bool)) or isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a scalar, got {type(value).__name__}")
    return RunConfig(**data)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.canonical_json().encode()).hexdigest()
