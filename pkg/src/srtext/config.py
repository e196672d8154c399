"""Model configuration and its consistency rules.

All geometry below refers to the low-resolution input; the high-resolution
side is always 2x per axis (4x pixels).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789"


class ConfigError(ValueError):
    """A configuration violates one of its consistency rules."""


@dataclass
class ModelConfig:
    # Iterative guidance rounds between the two branches.
    iterations: int = 2
    # LR input geometry; the HR/SR side is (channels, 2*height, 2*width).
    height: int = 16
    width: int = 64
    channels: int = 3
    # Channel count of the pixel branch's feature maps.
    hidden_channels: int = 64
    # Token count and dimensionality of the recognition branch.
    num_tokens: int = 32
    token_dim: int = 196
    charset: str = CHARSET
    blank_index: int = 0
    # Transformer hyperparameters of each per-iteration recognition stage.
    encoder_depth: int = 2
    encoder_heads: int = 4
    # Per-direction hidden size of the recurrent scans inside SRB blocks;
    # None resolves to hidden_channels // 2.
    srb_hidden: int | None = None
    # Width strides of the four transposed-conv layers in the clue projector
    # (height stride is always 2); free parameters of the ladder.
    projector_width_strides: tuple[int, int, int, int] = (1, 1, 2, 1)

    def __post_init__(self):
        if self.srb_hidden is None:
            self.srb_hidden = max(1, self.hidden_channels // 2)
        self.projector_width_strides = tuple(self.projector_width_strides)

    @property
    def num_classes(self) -> int:
        """Class count of every frame distribution: charset plus the CTC blank."""
        return len(self.charset) + 1

    @property
    def hr_size(self) -> tuple[int, int]:
        return (2 * self.height, 2 * self.width)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["projector_width_strides"] = list(self.projector_width_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key '{unknown[0]}'")
        return cls(**d)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Check every ModelConfig invariant; return cfg unchanged if all hold.

    Raises ConfigError naming the first violated rule.
    """
    if cfg.iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if cfg.height <= 0 or cfg.height % 2 != 0:
        raise ConfigError("height must be a positive even number")
    if cfg.width <= 0 or cfg.width % 32 != 0:
        raise ConfigError("width not divisible by 32")
    if cfg.channels != 3:
        raise ConfigError("channels must be 3")
    # Token count implied by the recognition patch rule [height, width // 32].
    if cfg.num_tokens != cfg.width // (cfg.width // 32):
        raise ConfigError(
            f"num_tokens must equal width // (width // 32) = "
            f"{cfg.width // (cfg.width // 32)}, got {cfg.num_tokens}"
        )
    # 2x pixel shuffle maps hidden_channels to hidden_channels // 4.
    if cfg.hidden_channels <= 0 or cfg.hidden_channels % 4 != 0:
        raise ConfigError("hidden_channels not divisible by 4")
    if len(cfg.charset) != 36 or cfg.charset != CHARSET:
        raise ConfigError(
            "charset must be exactly the 26 lowercase letters followed by the 10 digits"
        )
    if len(set(cfg.charset)) != len(cfg.charset):
        raise ConfigError("charset contains duplicate characters")
    if cfg.blank_index != 0:
        raise ConfigError("blank_index must be 0")
    if cfg.token_dim <= 0:
        raise ConfigError("token_dim must be positive")
    if cfg.encoder_depth < 1:
        raise ConfigError("encoder_depth must be >= 1")
    if cfg.encoder_heads < 1 or cfg.token_dim % cfg.encoder_heads != 0:
        raise ConfigError("encoder_heads must divide token_dim")
    if cfg.srb_hidden is None or cfg.srb_hidden < 1:
        raise ConfigError("srb_hidden must be >= 1")
    if len(cfg.projector_width_strides) != 4 or any(
        s not in (1, 2) for s in cfg.projector_width_strides
    ):
        raise ConfigError("projector_width_strides must be four values from {1, 2}")
    return cfg


def load_config(path: str | Path) -> ModelConfig:
    """Read a JSON config file whose keys are ModelConfig field names."""
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return validate_config(ModelConfig.from_dict(d))


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
