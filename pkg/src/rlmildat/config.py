"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

FRAMEWORKS = ("mil", "rlmil", "rlmil_dat")


@dataclass
class TrainConfig:
    framework: str = "rlmil_dat"
    label: str = "gender"
    pooling: str = "mean"
    lr_task: float = 0.05
    lr_actor: float = 0.05
    lr_encoder: float = 0.05
    lr_domain: float = 0.05
    batch_size: int = 16
    epochs: int = 30
    early_stopping_patience: int = 10
    bag_size: int = 20
    whole_bag_size: int = 100
    pool_size: int = 10
    hdim: int = 64
    hp: int = 32
    hd: int = 0  # 0 -> same as hdim
    attention_dim: int = 64
    encoder_hidden: int = 256
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"
    grl_horizon: int = 10
    entropy_weight: float = 0.01
    baseline_beta: float = 0.9
    reward: str = "loglik"
    task_from_sample: bool = False
    domain_on_all: bool = False
    present_only: bool = False
    seed: int = 0

    def validate(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}; choose from {FRAMEWORKS}")
        if self.label not in ("age", "gender"):
            raise ConfigError(f"label must be 'age' or 'gender', got {self.label!r}")
        if self.early_stopping_patience > self.epochs:
            raise ConfigError("early_stopping_patience must not exceed epochs")
        for name in ("batch_size", "epochs", "bag_size", "whole_bag_size", "pool_size", "hdim", "hp",
                     "attention_dim", "encoder_hidden", "early_stopping_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr_task", "lr_actor", "lr_encoder", "lr_domain", "grl_lambda", "entropy_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.reward not in ("loglik", "accuracy"):
            raise ConfigError(f"unknown reward {self.reward!r}")
        return self

    def encoder_sizes(self, d):
        return (d, self.encoder_hidden, d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_TYPES = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}


def coerce(key, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES[key]
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return s in ("true", "1", "yes")
        if typ is int:
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def config_to_text(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def config_from_text(text, base=None):
    kw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kw[k] = coerce(k, v)
    return dataclasses.replace(base or TrainConfig(), **kw)


def load_config(path, base=None):
    return config_from_text(Path(path).read_text(encoding="utf-8"), base)


def save_config(cfg, path):
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")
