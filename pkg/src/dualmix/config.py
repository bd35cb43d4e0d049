"""Structured run configuration, loaded from YAML.

Schema (all keys optional; unknown keys are rejected)::

    epochs: 50              # E; also the pruning horizon
    batch_size: 32
    lr: 1.0e-3              # base LR, cosine-annealed to lr_min
    lr_min: 1.0e-5
    weight_decay: 1.0e-4
    betas: [0.9, 0.999]
    lambda_step: 1.0
    lambda_anchor: 0.05
    hypo: {lambda_mse, lambda_wta, lambda_conf, beta, wta_start, wta_end}
    pruning: {delta_0, delta_f, eta_0, eta_f}
    model: {...}            # ModelConfig fields
    k: 20
    seed: 0
    dynamic_horizon: true   # random history truncation to 2..t_hist per batch
    min_obs: 2
    hypo_detach_mixture: true
    conf_mc: 200            # MC draws for the confidence hinge during training
    checkpoint_every: 10    # epochs; 0 disables intermediate checkpoints
    train_data: path        # corpus directory (synth) or ETH/UCY text file
    val_data: path
    max_scenes: null

Relative data paths resolve against ``$DUALMIX_DATA_ROOT`` when set.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import ModelConfig
from .hypotheses import HypoLossWeights
from .pruning import PruningSchedule

DATA_ROOT_ENV = "DUALMIX_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    lambda_step: float = 1.0
    lambda_anchor: float = 0.05
    hypo: HypoLossWeights = field(default_factory=HypoLossWeights)
    pruning: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    k: int = 20
    seed: int = 0
    dynamic_horizon: bool = True
    min_obs: int = 2
    hypo_detach_mixture: bool = True
    conf_mc: int = 200
    checkpoint_every: int = 10
    train_data: str | None = None
    val_data: str | None = None
    max_scenes: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("batch_size", "k", "conf_mc"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "lr_min"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_min > self.lr:
            raise ConfigError("lr_min exceeds lr")
        if self.weight_decay < 0 or self.lambda_step < 0 or self.lambda_anchor < 0:
            raise ConfigError("weight decay and loss weights must be nonnegative")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        self.betas = (float(b1), float(b2))
        if not 2 <= self.min_obs:
            raise ConfigError("min_obs must be >= 2")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.schedule()  # validates the pruning block

    def schedule(self) -> PruningSchedule:
        try:
            return PruningSchedule(total_epochs=max(self.epochs, 1), **self.pruning)
        except TypeError as exc:
            raise ConfigError(f"bad pruning block: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig(**(d["model"] or {}))
            if "hypo" in d:
                d["hypo"] = HypoLossWeights(**(d["hypo"] or {}))
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def load_config(path=None, **overrides) -> TrainConfig:
    d = {}
    if path is not None:
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def dump_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def resolve_data_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    if not p.exists():
        raise FileNotFoundError(f"data path does not exist: {p}")
    return p
