"""Two-stage semi-supervised sound event detection on a synthetic corpus.

A dual-branch CRNN + transformer-encoder detector trained first against a
frozen encoder and then jointly fine-tuned under heavily weighted
consistency losses, evaluated with intersection-criterion detection scores.
"""

from .config import RunConfig, load_config, save_config
from .corpus import CorpusSpec, Kind, load_manifest, synthesize_toy_corpus
from .features import FeatureConfig, logmel_cnn, logmel_encoder
from .metrics import PsdsParams, decode_events, event_f1, psds, psds_presets
from .model import EncoderSpec, ModelConfig, SedModel, adaptive_pool_align, build_model
from .schedules import (
    EncoderKind,
    Stage,
    StageConfig,
    llrd_rates,
    lr_schedule,
    ramp_weight,
    stage_config_defaults,
)
from .semisup import bce_loss, composite_loss, ema_update, ict_loss, make_teacher, mt_loss
from .trainer import finetune_stage, train_frozen_stage

__all__ = [
    "RunConfig",
    "load_config",
    "save_config",
    "CorpusSpec",
    "Kind",
    "load_manifest",
    "synthesize_toy_corpus",
    "FeatureConfig",
    "logmel_cnn",
    "logmel_encoder",
    "PsdsParams",
    "decode_events",
    "event_f1",
    "psds",
    "psds_presets",
    "EncoderSpec",
    "ModelConfig",
    "SedModel",
    "adaptive_pool_align",
    "build_model",
    "EncoderKind",
    "Stage",
    "StageConfig",
    "llrd_rates",
    "lr_schedule",
    "ramp_weight",
    "stage_config_defaults",
    "bce_loss",
    "composite_loss",
    "ema_update",
    "ict_loss",
    "make_teacher",
    "mt_loss",
    "finetune_stage",
    "train_frozen_stage",
]

__version__ = "0.1.0"
