"""Model and training configuration.

Defaults reproduce the published hyperparameters (hidden 200, word 100,
char 30, 3 layers, 8 heads, Adam at 1e-3, dropout 0.5, clipping 5.0,
batch 24, decay 0.05 every 1000 steps). Values can come from a flat
``key=value`` file and are overridden by explicit keyword arguments.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from pair_absa.errors import ConfigError, ParseError

logger = logging.getLogger(__name__)

Task = Literal["aste", "aesc"]
DirectionMode = Literal["uni", "bi", "quad"]

DIRECTION_COUNT = {"uni": 1, "bi": 2, "quad": 4}

OUTPUT_DIR_ENV = "PAIR_ABSA_OUTPUT_DIR"
LOG_LEVEL_ENV = "PAIR_ABSA_LOG_LEVEL"


class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d: int = Field(200, ge=1)
    n_heads: int = Field(8, ge=1)
    n_layers: int = Field(3, ge=1)
    ffn_inner_dim: int = Field(25, ge=1)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    ffn_activation: Literal["relu", "none"] = "relu"
    use_positions: bool = True
    max_positions: int = Field(512, ge=1)
    layer_norm_eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def _heads_divide_d(self) -> "EncoderConfig":
        if self.d % self.n_heads:
            raise ValueError(f"model dim {self.d} is not divisible by {self.n_heads} heads")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: Task = "aste"

    # dimensions
    hidden_dim: int = Field(200, ge=1)
    word_dim: int = Field(100, ge=1)
    char_embed_dim: int = Field(30, ge=1)
    char_out_dim: int = Field(100, ge=2)
    pair_hidden_dim: int = Field(50, ge=1)
    pair_dim: Optional[int] = Field(None, ge=1)
    ffn_inner_dim: Optional[int] = Field(None, ge=1)
    n_layers: int = Field(3, ge=1)
    n_heads: int = Field(8, ge=1)
    max_positions: int = Field(512, ge=1)

    # architecture switches
    directions: DirectionMode = "quad"
    use_pair_encoder: bool = True
    use_interaction: bool = True
    use_char: bool = True
    use_positions: bool = True
    share_direction_weights: bool = False
    ffn_activation: Literal["relu", "none"] = "relu"
    layer_norm_eps: float = Field(1e-5, gt=0.0)
    oov_init_range: float = Field(0.1, ge=0.0)

    # objective and decoding
    none_weight: float = Field(1.0, ge=0.0)
    bio_repair: Literal["begin", "drop"] = "begin"

    # optimisation
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    lr_schedule: Literal["inverse_time", "exponential"] = "inverse_time"
    decay_rate: float = Field(0.05, ge=0.0)
    decay_steps: int = Field(1000, ge=1)
    clip_norm: float = Field(5.0, gt=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(24, ge=1)
    epochs: int = Field(100, ge=0)
    max_steps: Optional[int] = Field(None, ge=0)
    seed: int = Field(0, ge=0)

    # execution
    dtype: Literal["float64", "float32"] = "float64"
    mdgru_workers: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        if self.hidden_dim % self.n_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}"
            )
        if self.char_out_dim % 2:
            raise ValueError(f"char_out_dim must be even (two directions), got {self.char_out_dim}")
        if not self.use_pair_encoder and self.use_interaction:
            # without a pair grid the encoders only share the token representation
            self.use_interaction = False
        return self

    @property
    def n_directions(self) -> int:
        return DIRECTION_COUNT[self.directions]

    @property
    def pair_out_dim(self) -> int:
        return self.pair_hidden_dim * self.n_directions

    @property
    def resolved_pair_dim(self) -> int:
        return self.pair_dim if self.pair_dim is not None else self.hidden_dim

    @property
    def resolved_ffn_dim(self) -> int:
        return self.ffn_inner_dim if self.ffn_inner_dim is not None else max(1, self.hidden_dim // self.n_heads)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d=self.hidden_dim,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            ffn_inner_dim=self.resolved_ffn_dim,
            dropout_rate=self.dropout,
            ffn_activation=self.ffn_activation,
            use_positions=self.use_positions,
            max_positions=self.max_positions,
            layer_norm_eps=self.layer_norm_eps,
        )


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    if value.lower() in ("none", "null", ""):
        return None
    return value


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a flat ``key=value`` file; ``#`` starts a comment."""
    path = Path(path)
    values: Dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError("expected key=value", path, line_no, 1)
            key, raw = text.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError("empty key", path, line_no, 1)
            if key in values:
                logger.warning(f"{path}:{line_no}: '{key}' set twice, last value wins")
            values[key] = _parse_value(raw)
    logger.info(f"Loaded {len(values)} config values from {path}")
    return values


def build_config(
    config_file: Optional[Union[str, Path]] = None, **overrides: Any
) -> ModelConfig:
    """Defaults < config file < overrides (``None`` overrides are ignored)."""
    values: Dict[str, Any] = {}
    if config_file is not None:
        values.update(load_config_file(config_file))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ModelConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def output_dir_from_env(default: str = "runs") -> Path:
    load_dotenv()
    return Path(os.getenv(OUTPUT_DIR_ENV, default))


def log_level_from_env(default: str = "INFO") -> str:
    load_dotenv()
    return os.getenv(LOG_LEVEL_ENV, default).upper()
