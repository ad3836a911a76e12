"""Scalar training schedules.

Loss-weight ramp-ups, exponential-warmup + cosine-decay learning rates,
and layer-wise learning-rate decay (LLRD) for the transformer encoder.
All functions are pure in (step, config).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .exceptions import ConfigurationError


class Stage(str, Enum):
    FROZEN = "frozen"
    FINETUNE = "finetune"


class EncoderKind(str, Enum):
    FRAME_WISE = "frame"
    PATCH_WISE = "patch"


@dataclass
class StageConfig:
    """Hyperparameters of one training stage."""

    alpha_cnn: float
    alpha_rnn: float
    alpha_encoder: float | None
    r_mt_max: float
    r_ict_max: float
    r_eps: int
    total_epochs: int
    llrd_factor: float | None
    encoder_frozen: bool
    use_ict: bool
    allow_freq_warp: bool
    ema_decay: float = 0.999
    grad_clip_norm: float = 5.0
    consistency_all_items: bool = True
    teacher_sees_warp: bool = True
    supervised_loss_enabled: bool = True

    def __post_init__(self):
        if self.r_eps <= 0:
            raise ConfigurationError("r_eps must be positive")
        if self.r_eps > self.total_epochs:
            raise ConfigurationError("r_eps must not exceed total_epochs")
        for name in ("alpha_cnn", "alpha_rnn"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if not self.encoder_frozen and (self.alpha_encoder is None or self.alpha_encoder <= 0):
            raise ConfigurationError("alpha_encoder must be > 0 when the encoder trains")


def ramp_weight(epoch_frac: float, r_eps: float, w_max: float) -> float:
    """Exponential ramp from ~0 at epoch 0 to exactly w_max at epoch r_eps.

    w(e) = w_max * exp(-5 * (1 - min(e / r_eps, 1))^2); constant afterwards.
    """
    if r_eps <= 0:
        raise ConfigurationError("r_eps must be positive")
    if w_max < 0:
        raise ConfigurationError("w_max must be >= 0")
    x = min(epoch_frac / r_eps, 1.0)
    return w_max * math.exp(-5.0 * (1.0 - x) ** 2)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, alpha: float) -> float:
    """Exponential warmup to alpha, then cosine decay to alpha / 10.

    Both phases meet exactly at alpha when step == warmup_steps; the final
    step yields exactly alpha / 10.
    """
    if total_steps <= warmup_steps:
        raise ConfigurationError("total_steps must exceed warmup_steps")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        if warmup_steps == 0:
            return alpha
        x = step / warmup_steps
        return alpha * math.exp(-5.0 * (1.0 - x) ** 2)
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    floor = alpha / 10.0
    return floor + (alpha - floor) * (1.0 + math.cos(math.pi * progress)) / 2.0


@dataclass(frozen=True)
class LlrdRates:
    """Per-block encoder learning rates, ordered from input block to output block."""

    block_rates: list[float]
    embed_rate: float


def llrd_rates(alpha_encoder: float, n_blocks: int, factor: float = 0.5) -> LlrdRates:
    """Geometric learning-rate decay from the last transformer block inward.

    Block i (0-indexed from the input) gets alpha * factor^(n_blocks - 1 - i);
    tokenizer/embedding parameters get the deepest decay, alpha * factor^n_blocks.
    """
    if n_blocks < 1:
        raise ConfigurationError("n_blocks must be >= 1")
    if not (0 < factor <= 1):
        raise ConfigurationError("factor must be in (0, 1]")
    blocks = [alpha_encoder * factor ** (n_blocks - 1 - i) for i in range(n_blocks)]
    return LlrdRates(block_rates=blocks, embed_rate=alpha_encoder * factor**n_blocks)


# Full-scale defaults for each (stage, encoder kind) combination. Desk-scale
# runs override total_epochs / r_eps through the run config.
_FROZEN_DEFAULTS = dict(
    alpha_cnn=1e-3,
    alpha_rnn=1e-3,
    alpha_encoder=None,
    r_mt_max=2.0,
    r_ict_max=0.0,
    r_eps=50,
    total_epochs=100,
    llrd_factor=None,
    encoder_frozen=True,
    use_ict=False,
    allow_freq_warp=False,
)

_FINETUNE_FRAME_DEFAULTS = dict(
    alpha_cnn=2e-4,
    alpha_rnn=2e-3,
    alpha_encoder=2e-4,
    r_mt_max=70.0,
    r_ict_max=17.5,
    r_eps=10,
    total_epochs=250,
    llrd_factor=0.5,
    encoder_frozen=False,
    use_ict=True,
    allow_freq_warp=True,
)

_FINETUNE_PATCH_DEFAULTS = dict(
    alpha_cnn=5e-4,
    alpha_rnn=5e-4,
    alpha_encoder=5e-6,
    r_mt_max=140.0,
    r_ict_max=35.0,
    r_eps=10,
    total_epochs=250,
    llrd_factor=None,
    encoder_frozen=False,
    use_ict=True,
    allow_freq_warp=True,
)


def stage_config_defaults(stage: Stage, encoder_kind: EncoderKind) -> StageConfig:
    """Default StageConfig for a stage/encoder combination."""
    stage = Stage(stage)
    encoder_kind = EncoderKind(encoder_kind)
    if stage is Stage.FROZEN:
        return StageConfig(**_FROZEN_DEFAULTS)
    if encoder_kind is EncoderKind.FRAME_WISE:
        return StageConfig(**_FINETUNE_FRAME_DEFAULTS)
    return StageConfig(**_FINETUNE_PATCH_DEFAULTS)
