"""Model and training configuration dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .schema import N_FEATURES

__all__ = ["ModelConfig", "TrainConfig", "config_hash"]

_ROUTING_MODES = ("soft", "top2", "hard")
_ALPHA_MODES = ("stress", "learned", "fixed")
_TEMPERATURE_MODES = ("formula", "narrative")
_DIVERSITY_SIGNS = ("reward", "appendix")
_EXPERT_COUNTS = (1, 2, 4, 6)


@dataclass
class ModelConfig:
    """Architecture switches; defaults give the full model."""

    n_features: int = N_FEATURES
    window: int = 20
    hidden_dim: int = 128
    context_dim: int = 64
    latent_dim: int = 64
    heads: int = 4
    gcn_layers: int = 2
    top_k: int = 20
    expert_count: int = 4
    routing: str = "soft"
    alpha_mode: str = "stress"
    alpha_fixed: float = 0.5
    multi_source: bool = True
    cross_modal: bool = True
    temperature_mode: str = "formula"

    def validate(self) -> None:
        if self.window < 5:
            raise ValueError("window must be >= 5 (longest decode horizon)")
        if self.hidden_dim < 8 or self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be a positive multiple of heads")
        if (2 * self.hidden_dim) % self.heads:
            raise ValueError("2*hidden_dim must divide evenly into heads")
        if self.gcn_layers < 1:
            raise ValueError("gcn_layers must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.expert_count not in _EXPERT_COUNTS:
            raise ValueError(f"expert_count must be one of {_EXPERT_COUNTS}")
        if self.routing not in _ROUTING_MODES:
            raise ValueError(f"routing must be one of {_ROUTING_MODES}")
        if self.alpha_mode not in _ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {_ALPHA_MODES}")
        if self.temperature_mode not in _TEMPERATURE_MODES:
            raise ValueError(f"temperature_mode must be one of {_TEMPERATURE_MODES}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    gamma1: float = 0.01
    gamma2: float = 0.001
    diversity_sign: str = "reward"
    # Global gradient-norm ceiling (0 disables). The first training windows
    # carry a very large reconstruction error; unclipped, that transient can
    # saturate the expert gate into a permanent one-hot state.
    clip_norm: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if self.diversity_sign not in _DIVERSITY_SIGNS:
            raise ValueError(f"diversity_sign must be one of {_DIVERSITY_SIGNS}")


def _from_dict(cls, payload: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**payload)


def model_config_from_dict(payload: dict) -> ModelConfig:
    cfg = _from_dict(ModelConfig, payload)
    cfg.validate()
    return cfg


def train_config_from_dict(payload: dict) -> TrainConfig:
    cfg = _from_dict(TrainConfig, payload)
    cfg.validate()
    return cfg


def config_hash(model_cfg: ModelConfig) -> str:
    blob = json.dumps(asdict(model_cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
