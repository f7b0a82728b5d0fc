"""Run configuration for the restorer and experiment harnesses.

JSON configs are strict: unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, asdict


class ConfigError(Exception):
    pass


@dataclass
class RestorerConfig:
    image_size: int = 64
    timesteps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.12
    backbone: str = "vae"
    fusion_strategy: str = "bilinear_static"
    feature_extractor: str = "res34"
    embed_dim: int = 64
    attention_heads: int = 8
    width: int = 32
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 16
    kl_weight: float = 1e-3
    condition_batch: int = 16  # readable images per condition recompute
    target_label: str = "optic_disc"
    split_ratios: tuple = (0.64, 0.16, 0.20)
    seed: int = 0

    def validate(self) -> "RestorerConfig":
        from .backbones import BACKBONE_KINDS
        from .condfeat import EXTRACTOR_KINDS
        from .fusion import STRATEGY_KEYS
        from .labels import LABEL_NAMES

        if self.backbone not in BACKBONE_KINDS:
            raise ConfigError(f"backbone must be one of {BACKBONE_KINDS}, got {self.backbone!r}")
        if self.feature_extractor not in EXTRACTOR_KINDS:
            raise ConfigError(
                f"feature_extractor must be one of {EXTRACTOR_KINDS}, got {self.feature_extractor!r}")
        if self.fusion_strategy not in STRATEGY_KEYS:
            raise ConfigError(
                f"fusion_strategy must be one of {STRATEGY_KEYS}, got {self.fusion_strategy!r}")
        if self.target_label not in LABEL_NAMES:
            raise ConfigError(f"target_label must be one of {LABEL_NAMES}")
        if self.embed_dim % self.attention_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.attention_heads}")
        if self.image_size % 8 != 0:
            raise ConfigError("image_size must be a multiple of 8")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.timesteps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("timesteps, epochs, batch_size must be >= 1")
        if self.learning_rate <= 0 or self.kl_weight < 0:
            raise ConfigError("learning_rate must be > 0 and kl_weight >= 0")
        ratios = tuple(self.split_ratios)
        if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(
                f"split_ratios must be three positive values summing to 1, got {self.split_ratios}")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "RestorerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if isinstance(cfg.split_ratios, list):
            cfg.split_ratios = tuple(cfg.split_ratios)
        return cfg.validate()

    @classmethod
    def from_json(cls, path: str) -> "RestorerConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
