"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lr: float = 0.001
    K: int = 5
    t: int = 20
    ws_interval: int = 50
    pretrain_patience: int = 20
    max_epochs: int = 100
    negatives_per_positive: int = 5
    negative_refresh_epochs: int = 10
    seed: int = 0
    # model and protocol settings
    beta: float = 0.1
    hidden_dim: int = 300
    num_layers: int = 2
    neighborhood_dim: int = 50
    optimizer: str = "sgd"
    ws_steps: int = 5
    split_fraction: float = 0.3
    validation_fraction: float = 0.1
    matching: bool = True
    sampling: str = "learned"
    rescreen_width: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.ws_interval < 1:
            raise ConfigError("ws_interval must be >= 1")
        for name in ("K", "t", "negatives_per_positive", "negative_refresh_epochs", "num_layers",
                     "hidden_dim", "neighborhood_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_epochs < 0 or self.pretrain_patience < 1 or self.ws_steps < 0:
            raise ConfigError("epoch counts must be non-negative and patience >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.sampling not in ("learned", "random"):
            raise ConfigError(f"unknown sampling strategy {self.sampling!r}")
        if not 0 < self.split_fraction < 1 or not 0 <= self.validation_fraction < 1:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.rescreen_width < 0:
            raise ConfigError("rescreen_width must be >= 0 (0 means every counterpart)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, kinds[key], lineno)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _coerce(key, value, kind, lineno):
    try:
        if kind in ("bool", bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
