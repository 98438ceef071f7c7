"""Model/training configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path


@dataclass
class ModelConfig:
    """Hyperparameters of the toy text-prompted segmentation model.

    d          feature width shared by image tokens, text tokens and queries
    n_queries  number of learnable queries
    heads      attention heads; head_dim defaults to d // heads
    patch      side of the square patches the image encoder embeds
    ffn_hidden hidden width of the feed-forward block (default 2*d)
    lambda_bce / lambda_dice   loss term weights
    eps        smoothing constant of the overlap loss term
    activation "relu" (default) or "identity" (used by the gradient checker)
    """

    d: int = 16
    n_queries: int = 16
    heads: int = 2
    head_dim: int | None = None
    patch: int = 4
    ffn_hidden: int | None = None
    max_prompt_len: int = 32
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    eps: float = 1.0
    align_weight: float = 0.1  # weight of the class/text cosine alignment term
    activation: str = "relu"
    lr: float = 3e-3
    lr_decay: float = 1.0  # per-epoch multiplicative decay of the learning rate
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.head_dim is None:
            if self.d % self.heads:
                raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
            self.head_dim = self.d // self.heads
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.d
        if self.lambda_bce < 0 or self.lambda_dice < 0 or self.lambda_bce + self.lambda_dice <= 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
