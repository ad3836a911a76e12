"""Two-stage training orchestration.

Stage 1 trains the CRNN against a frozen encoder with mixup-only
augmentation and a lightly weighted mean-teacher loss. Stage 2 warm-starts
from the stage-1 checkpoint (student and teacher) and jointly fine-tunes
everything with per-module learning rates, optional layer-wise decay on the
encoder, both augmentations, and heavily weighted consistency losses.

Runs are resumable: checkpoints carry model/teacher/optimizer state, all
RNG states, and the validation history, and a resumed run reproduces the
uninterrupted one bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .config import RunConfig
from .corpus import (
    AnnotatedClip,
    BatchComposer,
    CompositeBatch,
    CorpusManifest,
    Kind,
    load_clip,
    rasterize_events,
)
from .exceptions import CheckpointError, ConfigurationError, DivergenceError
from .features import (
    AugmentationDraw,
    Branch,
    FeatureConfig,
    MelSpectrogram,
    draw_augmentations,
    frame_count,
    frequency_warp,
    logmel_cnn,
    logmel_encoder,
    mixup,
)
from .metrics import decode_over_thresholds, event_f1, psds
from .model import PredictionPair, SedModel, build_model, pretrain_encoder
from .schedules import Stage, StageConfig, llrd_rates, lr_schedule, ramp_weight
from .semisup import composite_loss, ema_update, make_teacher

CHECKPOINT_VERSION = 1


def cnn_frames(n_samples: int, cfg: FeatureConfig) -> int:
    win = round(cfg.cnn_win * cfg.sample_rate)
    hop = round(cfg.cnn_hop * cfg.sample_rate)
    return frame_count(n_samples, win, hop)


def n_out_frames(n_samples: int, cfg: FeatureConfig) -> int:
    return cnn_frames(n_samples, cfg) // cfg.cnn_time_stride


class FeatureProvider:
    """Computes branch features, caching them per clip for unmixed inputs."""

    def __init__(self, feat_cfg: FeatureConfig, encoder_kind):
        self.cfg = feat_cfg
        self.encoder_kind = encoder_kind
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def clip_features(self, clip: AnnotatedClip) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(clip.clip_id)
        if hit is None:
            cnn = logmel_cnn(clip.samples, self.cfg).values
            enc = logmel_encoder(clip.samples, self.encoder_kind, self.cfg).values
            hit = (cnn, enc)
            self._cache[clip.clip_id] = hit
        return hit

    def wave_features(self, wave: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            logmel_cnn(wave, self.cfg).values,
            logmel_encoder(wave, self.encoder_kind, self.cfg).values,
        )

    def batch_features(
        self, batch: CompositeBatch, use_cache: bool, clips_by_id: dict[str, AnnotatedClip] | None
    ) -> tuple[np.ndarray, np.ndarray]:
        cnn_list, enc_list = [], []
        for i in range(batch.size):
            if use_cache and clips_by_id is not None:
                cnn, enc = self.clip_features(clips_by_id[batch.clip_ids[i]])
            else:
                cnn, enc = self.wave_features(batch.waveforms[i])
            cnn_list.append(cnn)
            enc_list.append(enc)
        return np.stack(cnn_list), np.stack(enc_list)

    def warp_encoder(self, enc: np.ndarray, factor: float) -> np.ndarray:
        out = np.empty_like(enc)
        for i in range(enc.shape[0]):
            spec = MelSpectrogram(
                values=enc[i], frame_hop=0.0, frame_len=0.0, origin_branch=Branch.ENCODER
            )
            out[i] = frequency_warp(spec, factor).values
        return out


def build_streams(manifest: CorpusManifest) -> tuple[dict[str, list[AnnotatedClip]], list[AnnotatedClip]]:
    """Training streams (strong_real/strong_synth/weak/unlabeled) plus the
    held-out strong validation split."""
    clips = {e.filename: load_clip(manifest, e) for e in manifest.entries}
    splits = manifest.splits
    strong_names = [e.filename for e in manifest.entries_of(Kind.STRONG)]
    if splits.get("strong_real") or splits.get("strong_synth"):
        real = [clips[n] for n in splits.get("strong_real", [])]
        synth = [clips[n] for n in splits.get("strong_synth", [])]
        val = [clips[n] for n in splits.get("strong_val", [])]
    else:
        # no recorded splits: deterministic thirds of the strong set
        n = len(strong_names)
        n_val = max(1, n // 5)
        train = strong_names[: n - n_val]
        half = len(train) // 2
        real = [clips[x] for x in train[:half]]
        synth = [clips[x] for x in train[half:]]
        val = [clips[x] for x in strong_names[n - n_val :]]
    streams = {
        "strong_real": real,
        "strong_synth": synth,
        "weak": [clips[e.filename] for e in manifest.entries_of(Kind.WEAK)],
        "unlabeled": [clips[e.filename] for e in manifest.entries_of(Kind.UNLABELED)],
    }
    return streams, val


def predict_strong(model: SedModel, provider: FeatureProvider, clip: AnnotatedClip) -> np.ndarray:
    """(T_out, C) strong posteriors for one clip (encoder run without grads)."""
    cnn, enc = provider.clip_features(clip)
    model.eval()
    with torch.no_grad():
        preds = model(
            torch.from_numpy(cnn).unsqueeze(0),
            torch.from_numpy(enc).unsqueeze(0),
            encoder_frozen=True,
        )
    return preds.strong[0].numpy()


def validate_predictions(
    strong_by_clip: dict[str, np.ndarray],
    truth_by_clip: dict[str, list],
    run_cfg: RunConfig,
    n_classes: int,
) -> dict:
    """PSDS1 + PSDS2 (plus collar F1 at threshold 0.5) from decoded posteriors."""
    if not truth_by_clip:
        raise ConfigurationError("empty validation split")
    hop = run_cfg.features.hop_out
    ecfg = run_cfg.eval
    detections = {t: {} for t in ecfg.psds1.thresholds}
    for clip_id, strong in strong_by_clip.items():
        per_thr = decode_over_thresholds(strong, ecfg.psds1.thresholds, ecfg.median_len, hop)
        for t, evs in per_thr.items():
            detections[t][clip_id] = evs
    total_dur = len(truth_by_clip) * run_cfg.corpus.clip_seconds
    p1 = psds(detections, truth_by_clip, total_dur, n_classes, ecfg.psds1).score
    p2 = psds(detections, truth_by_clip, total_dur, n_classes, ecfg.psds2).score
    mid_thr = min(ecfg.psds1.thresholds, key=lambda t: abs(t - 0.5))
    f1 = event_f1(detections[mid_thr], truth_by_clip, collar=ecfg.collar)
    return {"psds1": p1, "psds2": p2, "metric": p1 + p2, "event_f1": f1}


def validate_model(
    model: SedModel,
    provider: FeatureProvider,
    val_clips: list[AnnotatedClip],
    run_cfg: RunConfig,
    n_classes: int,
) -> dict:
    strong_by_clip = {c.clip_id: predict_strong(model, provider, c) for c in val_clips}
    truth = {c.clip_id: list(c.events) for c in val_clips}
    return validate_predictions(strong_by_clip, truth, run_cfg, n_classes)


def save_checkpoint(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["version"] = CHECKPOINT_VERSION
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload


def _block_permutation(sizes: dict[str, int], rng: np.random.Generator) -> np.ndarray:
    """Random pairing that stays within each supervision-kind block, so mixed
    items keep well-defined targets and the kind masks are unchanged."""
    perm = np.arange(sum(sizes.values()))
    start = 0
    for name in corpus_mod.STREAM_NAMES:
        n = sizes[name]
        idx = np.arange(start, start + n)
        perm[idx] = idx[rng.permutation(n)]
        start += n
    return perm


@dataclass
class StageRunner:
    run_cfg: RunConfig
    manifest: CorpusManifest
    stage: Stage
    out_dir: Path
    warm_start: Path | None = None
    allow_cold_start: bool = False

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stage_cfg: StageConfig = (
            self.run_cfg.frozen if self.stage is Stage.FROZEN else self.run_cfg.finetune
        )
        self.n_classes = len(self.manifest.class_names)
        self.provider = FeatureProvider(self.run_cfg.features, self.run_cfg.model.encoder.kind)
        self.streams, self.val_clips = build_streams(self.manifest)
        if not self.val_clips:
            raise ConfigurationError("empty validation split")
        self.clips_by_id = {c.clip_id: c for cs in self.streams.values() for c in cs}

        clip_samples = round(self.run_cfg.corpus.clip_seconds * self.run_cfg.features.sample_rate)
        self.t_out = n_out_frames(clip_samples, self.run_cfg.features)

        stage_tag = 0 if self.stage is Stage.FROZEN else 1
        self.sampler_rng = np.random.default_rng(
            np.random.SeedSequence([self.run_cfg.seed, stage_tag, 0])
        )
        self.augment_rng = np.random.default_rng(
            np.random.SeedSequence([self.run_cfg.seed, stage_tag, 1])
        )

        sizes = {
            "strong_real": self.run_cfg.batch.strong_real,
            "strong_synth": self.run_cfg.batch.strong_synth,
            "weak": self.run_cfg.batch.weak,
            "unlabeled": self.run_cfg.batch.unlabeled,
        }
        self.sizes = sizes
        self.composer = BatchComposer(
            self.streams,
            sizes,
            n_classes=self.n_classes,
            n_out_frames=self.t_out,
            hop_out=self.run_cfg.features.hop_out,
            rng=self.sampler_rng,
        )
        self.steps_per_epoch = self.composer.steps_per_epoch()

        torch.manual_seed(self.run_cfg.seed)
        self.model = build_model(self.run_cfg.model, self.n_classes, self.run_cfg.features)
        if self.stage is Stage.FINETUNE:
            if self.warm_start is not None:
                state = load_checkpoint(self.warm_start)
                self.model.load_state_dict(state["model"])
            elif not self.allow_cold_start:
                raise ConfigurationError(
                    "fine-tuning requires a warm-start checkpoint (pass allow_cold_start to override)"
                )
        elif self.run_cfg.encoder_warmup_epochs > 0:
            warm_rng = np.random.default_rng(np.random.SeedSequence([self.run_cfg.seed, 2, 0]))
            mels = [self.provider.clip_features(c)[1] for cs in self.streams.values() for c in cs]
            pretrain_encoder(
                self.model.encoder,
                mels,
                self.run_cfg.encoder_warmup_epochs,
                self.run_cfg.encoder_warmup_lr,
                warm_rng,
            )
        # teacher starts as a copy of the (possibly warm-started) student
        self.teacher = make_teacher(self.model)

        self.optimizer = self._build_optimizer()
        self.total_steps = self.stage_cfg.total_epochs * self.steps_per_epoch
        self.warmup_steps = self.stage_cfg.r_eps * self.steps_per_epoch
        self.epoch = 0
        self.global_step = 0
        self.best_metric = -math.inf
        self.best_epoch = -1
        self.history: list[dict] = []

    def _build_optimizer(self) -> torch.optim.Adam:
        cfg = self.stage_cfg
        groups = [
            {"params": list(self.model.cnn.parameters()), "lr": cfg.alpha_cnn, "base_lr": cfg.alpha_cnn},
            {
                "params": list(self.model.merge.parameters()) + list(self.model.heads.parameters()),
                "lr": cfg.alpha_rnn,
                "base_lr": cfg.alpha_rnn,
            },
        ]
        if not cfg.encoder_frozen:
            enc = self.model.encoder
            if cfg.llrd_factor is not None:
                rates = llrd_rates(cfg.alpha_encoder, len(enc.blocks), cfg.llrd_factor)
                for block, rate in zip(enc.blocks, rates.block_rates):
                    groups.append({"params": list(block.parameters()), "lr": rate, "base_lr": rate})
                embed_params = list(enc.tokenizer.parameters()) + list(enc.out_norm.parameters())
                groups.append({"params": embed_params, "lr": rates.embed_rate, "base_lr": rates.embed_rate})
            else:
                groups.append(
                    {"params": list(enc.parameters()), "lr": cfg.alpha_encoder, "base_lr": cfg.alpha_encoder}
                )
        return torch.optim.Adam(groups)

    def _set_lrs(self) -> float:
        scale = lr_schedule(min(self.global_step, self.total_steps), self.total_steps, self.warmup_steps, 1.0)
        for group in self.optimizer.param_groups:
            group["lr"] = group["base_lr"] * scale
        return scale

    def _trainable_params(self):
        return [p for g in self.optimizer.param_groups for p in g["params"]]

    def _step(self, log_file) -> None:
        cfg = self.stage_cfg
        batch = self.composer.next_batch()
        draw = draw_augmentations(self.augment_rng, allow_fw=cfg.allow_freq_warp)
        if draw.use_mixup:
            draw.permutation = _block_permutation(self.sizes, self.augment_rng)

        epoch_frac = self.global_step / self.steps_per_epoch
        r_mt = ramp_weight(epoch_frac, cfg.r_eps, cfg.r_mt_max)
        r_ict = ramp_weight(epoch_frac, cfg.r_eps, cfg.r_ict_max) if cfg.use_ict else 0.0
        scale = self._set_lrs()

        strong_t = batch.strong_targets
        weak_t = batch.weak_targets
        if draw.use_mixup:
            lam, perm = draw.mix_lambda, draw.permutation
            waves = mixup(batch.waveforms, lam, perm)
            strong_t = mixup(strong_t, lam, perm)
            weak_t = mixup(weak_t, lam, perm)
            cnn_np, enc_np = self.provider.batch_features(
                CompositeBatch(
                    clip_ids=batch.clip_ids,
                    waveforms=waves,
                    kinds=batch.kinds,
                    strong_mask=batch.strong_mask,
                    weak_mask=batch.weak_mask,
                    unlabeled_mask=batch.unlabeled_mask,
                    strong_targets=strong_t,
                    weak_targets=weak_t,
                ),
                use_cache=False,
                clips_by_id=None,
            )
        else:
            cnn_np, enc_np = self.provider.batch_features(batch, True, self.clips_by_id)
        if draw.use_fw:
            enc_np = self.provider.warp_encoder(enc_np, draw.fw_factor)

        cnn_t = torch.from_numpy(np.ascontiguousarray(cnn_np))
        enc_t = torch.from_numpy(np.ascontiguousarray(enc_np))
        self.model.train()
        student_preds = self.model(cnn_t, enc_t, encoder_frozen=cfg.encoder_frozen)

        use_ict_now = cfg.use_ict and draw.use_mixup
        with torch.no_grad():
            if use_ict_now:
                # teacher consumes the unmixed (but identically warped) inputs
                t_cnn_np, t_enc_np = self.provider.batch_features(batch, True, self.clips_by_id)
                if draw.use_fw and cfg.teacher_sees_warp:
                    t_enc_np = self.provider.warp_encoder(t_enc_np, draw.fw_factor)
                teacher_a = self.teacher(
                    torch.from_numpy(t_cnn_np), torch.from_numpy(t_enc_np), encoder_frozen=True
                )
                perm_t = torch.from_numpy(draw.permutation)
                teacher_b = PredictionPair(
                    strong=teacher_a.strong[perm_t],
                    weak=teacher_a.weak[perm_t],
                    frame_hop_out=teacher_a.frame_hop_out,
                )
                teacher_preds = (teacher_a, teacher_b)
            else:
                teacher_preds = self.teacher(cnn_t, enc_t, encoder_frozen=True)

        breakdown = composite_loss(
            student_preds,
            teacher_preds,
            torch.from_numpy(strong_t),
            torch.from_numpy(weak_t),
            torch.from_numpy(batch.strong_mask),
            torch.from_numpy(batch.weak_mask),
            draw,
            r_mt=r_mt,
            r_ict=r_ict,
            use_ict=cfg.use_ict,
            supervised_enabled=cfg.supervised_loss_enabled,
        )
        if not torch.isfinite(breakdown.total):
            raise DivergenceError(
                f"non-finite loss at step {self.global_step}: {breakdown.as_dict()}"
            )

        self.optimizer.zero_grad()
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(self._trainable_params(), cfg.grad_clip_norm)
        self.optimizer.step()
        ema_update(self.model, self.teacher, cfg.ema_decay)
        self.global_step += 1

        record = {"step": self.global_step, "epoch": self.epoch, "lr_scale": scale}
        record.update(breakdown.as_dict())
        log_file.write(json.dumps(record) + "\n")

    def _state_payload(self) -> dict:
        return {
            "stage": self.stage.value,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "model": self.model.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "sampler_rng": self.composer.get_state(),
            "augment_rng": self.augment_rng.bit_generator.state,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "history": self.history,
        }

    def _restore(self, payload: dict) -> None:
        if payload["stage"] != self.stage.value:
            raise CheckpointError(
                f"checkpoint is for stage {payload['stage']!r}, not {self.stage.value!r}"
            )
        self.model.load_state_dict(payload["model"])
        self.teacher.load_state_dict(payload["teacher"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.composer.set_state(payload["sampler_rng"])
        self.augment_rng.bit_generator.state = payload["augment_rng"]
        self.epoch = payload["epoch"]
        self.global_step = payload["global_step"]
        self.best_metric = payload["best_metric"]
        self.best_epoch = payload["best_epoch"]
        self.history = list(payload["history"])

    def run(self, resume: Path | None = None) -> dict:
        if resume is not None:
            self._restore(load_checkpoint(resume))
        cfg = self.stage_cfg
        last_path = self.out_dir / "last.pt"
        best_path = self.out_dir / "best.pt"
        log_path = self.out_dir / "train_log.jsonl"
        with open(log_path, "a", encoding="utf-8") as log_file:
            while self.epoch < cfg.total_epochs:
                for _ in range(self.steps_per_epoch):
                    self._step(log_file)
                self.epoch += 1
                scores = validate_model(
                    self.model, self.provider, self.val_clips, self.run_cfg, self.n_classes
                )
                scores["epoch"] = self.epoch
                self.history.append(scores)
                log_file.write(json.dumps({"validation": scores}) + "\n")
                if scores["metric"] > self.best_metric:
                    self.best_metric = scores["metric"]
                    self.best_epoch = self.epoch
                    save_checkpoint(best_path, self._state_payload())
                save_checkpoint(last_path, self._state_payload())
        if not best_path.exists():
            save_checkpoint(best_path, self._state_payload())
        return {
            "best_ckpt": best_path,
            "last_ckpt": last_path,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "history": self.history,
        }


def train_frozen_stage(
    run_cfg: RunConfig, manifest: CorpusManifest, out_dir: Path, resume: Path | None = None
) -> dict:
    runner = StageRunner(run_cfg, manifest, Stage.FROZEN, out_dir)
    return runner.run(resume=resume)


def finetune_stage(
    run_cfg: RunConfig,
    manifest: CorpusManifest,
    out_dir: Path,
    warm_start: Path | None,
    allow_cold_start: bool = False,
    resume: Path | None = None,
) -> dict:
    runner = StageRunner(
        run_cfg,
        manifest,
        Stage.FINETUNE,
        out_dir,
        warm_start=warm_start,
        allow_cold_start=allow_cold_start,
    )
    return runner.run(resume=resume)
