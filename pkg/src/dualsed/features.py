"""LogMel front ends for both network branches, plus the two augmentations.

The CNN branch uses 128 ms windows with a 16 ms hop. The encoder branch has
its own front end so that the encoder's token resolution is reproducible:
frame-wise encoders consume one 40 ms frame per token, patch-wise encoders
consume 10 ms-hop frames later grouped into 16x16 time-frequency patches.

No centering is used anywhere: frames start at multiples of the hop and a
trailing partial frame is dropped, so frame counts are exact integer
arithmetic on sample counts.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache

import numpy as np

from .exceptions import BranchContractError, ConfigurationError


class Branch(str, Enum):
    CNN = "cnn"
    ENCODER = "encoder"


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    log_eps: float = 1e-5
    cnn_win: float = 0.128
    cnn_hop: float = 0.016
    frame_encoder_hop: float = 0.040
    patch_encoder_win: float = 0.025
    patch_encoder_hop: float = 0.010
    patch_size: int = 16
    cnn_time_stride: int = 4

    @property
    def hop_out(self) -> float:
        """Seconds per CNN output frame (16 ms input hop x total time stride)."""
        return self.cnn_hop * self.cnn_time_stride


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T, F)
    frame_hop: float
    frame_len: float
    origin_branch: Branch

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


@dataclass
class AugmentationDraw:
    use_mixup: bool
    use_fw: bool
    mix_lambda: float | None = None
    fw_factor: float | None = None
    permutation: np.ndarray | None = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-style mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for i in range(n_mels):
        lo, ctr, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_count(n_samples: int, win: int, hop: int) -> int:
    """Number of full frames; trailing partial frame dropped."""
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def _frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = frame_count(len(x), win, hop)
    if n == 0:
        raise ConfigurationError(f"waveform too short: {len(x)} samples < window {win}")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    return frames[:n]


def _logmel(wave: np.ndarray, win: int, hop: int, cfg: FeatureConfig) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise ConfigurationError("empty waveform")
    if not np.all(np.isfinite(wave)):
        raise ConfigurationError("non-finite values in waveform")
    frames = _frame_signal(wave, win, hop)
    window = np.hanning(win)
    spec = np.abs(np.fft.rfft(frames * window, axis=-1)) ** 2
    fb = mel_filterbank(cfg.n_mels, win, cfg.sample_rate, cfg.fmin, cfg.fmax)
    mel = spec @ fb.T
    return np.log(mel + cfg.log_eps).astype(np.float32)


def logmel_cnn(wave: np.ndarray, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    """CNN-branch front end: 128 ms window, 16 ms hop, 128 log-mel bins."""
    cfg = cfg or FeatureConfig()
    win = round(cfg.cnn_win * cfg.sample_rate)
    hop = round(cfg.cnn_hop * cfg.sample_rate)
    return MelSpectrogram(
        values=_logmel(wave, win, hop, cfg),
        frame_hop=cfg.cnn_hop,
        frame_len=cfg.cnn_win,
        origin_branch=Branch.CNN,
    )


def logmel_encoder(wave: np.ndarray, encoder_kind, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    """Encoder-branch front end.

    Frame-wise encoders get non-overlapping 40 ms frames (one per token);
    patch-wise encoders get 25 ms / 10 ms-hop frames that the tokenizer
    groups into 16x16 patches (160 ms per patch column).
    """
    from .schedules import EncoderKind

    cfg = cfg or FeatureConfig()
    kind = EncoderKind(encoder_kind)
    if kind is EncoderKind.FRAME_WISE:
        win = hop = round(cfg.frame_encoder_hop * cfg.sample_rate)
        frame_len = frame_hop = cfg.frame_encoder_hop
    else:
        win = round(cfg.patch_encoder_win * cfg.sample_rate)
        hop = round(cfg.patch_encoder_hop * cfg.sample_rate)
        frame_len, frame_hop = cfg.patch_encoder_win, cfg.patch_encoder_hop
    return MelSpectrogram(
        values=_logmel(wave, win, hop, cfg),
        frame_hop=frame_hop,
        frame_len=frame_len,
        origin_branch=Branch.ENCODER,
    )


def patch_grid(spec: MelSpectrogram, patch_size: int = 16) -> tuple[int, int]:
    """(time columns, frequency patches) of a patch-wise encoder input."""
    return spec.n_frames // patch_size, spec.n_mels // patch_size


def token_rate(encoder_kind, spec: MelSpectrogram, patch_size: int = 16) -> float:
    """Encoder tokens per second of covered audio, from the feature shape."""
    from .schedules import EncoderKind

    kind = EncoderKind(encoder_kind)
    if kind is EncoderKind.FRAME_WISE:
        return spec.n_frames / (spec.n_frames * spec.frame_hop)
    cols, fpatches = patch_grid(spec, patch_size)
    covered = cols * patch_size * spec.frame_hop
    return cols * fpatches / covered


def cnn_frame_rate(spec: MelSpectrogram, time_stride: int = 4) -> float:
    """CNN output frames per second of covered audio, from the feature shape."""
    t_out = spec.n_frames // time_stride
    covered = t_out * time_stride * spec.frame_hop
    return t_out / covered


def mixup(x: np.ndarray, lam: float, permutation: np.ndarray) -> np.ndarray:
    """Convex combination x' = lam * x + (1 - lam) * x[permutation].

    Works on waveforms and on label tensors alike (first axis is the batch).
    """
    if not (0.0 < lam <= 1.0):
        raise ConfigurationError(f"mixup lambda must be in (0, 1], got {lam}")
    x = np.asarray(x)
    return (lam * x + (1.0 - lam) * x[permutation]).astype(x.dtype)


def frequency_warp(spec: MelSpectrogram, factor: float) -> MelSpectrogram:
    """Stretch/squeeze the frequency axis by linear interpolation.

    The warped axis is cropped (factor > 1) or zero-padded (factor < 1) back
    to the original bin count; the time axis and output shape are unchanged.
    Only encoder-branch spectrograms may be warped.
    """
    if spec.origin_branch is not Branch.ENCODER:
        raise BranchContractError("frequency warping is only applied to the encoder branch")
    if factor <= 0:
        raise ConfigurationError("warp factor must be positive")
    values = spec.values
    n_mels = values.shape[1]
    n_warped = max(1, round(n_mels * factor))
    src = np.arange(n_warped, dtype=np.float64) / factor
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_mels - 1)
    frac = (src - lo).astype(values.dtype)
    lo = np.minimum(lo, n_mels - 1)
    warped = values[:, lo] * (1.0 - frac) + values[:, hi] * frac
    if n_warped >= n_mels:
        out = warped[:, :n_mels]
    else:
        out = np.zeros_like(values)
        out[:, :n_warped] = warped
    return replace(spec, values=out.astype(values.dtype))


def draw_augmentations(
    rng: np.random.Generator,
    batch_size: int | None = None,
    allow_fw: bool = True,
    mix_alpha: float = 0.2,
    fw_range: tuple[float, float] = (0.9, 1.1),
) -> AugmentationDraw:
    """Draw the per-step augmentation decision.

    Mixup and frequency warping are independent fair coins, i.e. a 25/50/25
    mix of none / exactly one / both. The frozen training stage passes
    allow_fw=False so only mixup is ever drawn there.
    """
    use_mixup = bool(rng.random() < 0.5)
    use_fw = bool(rng.random() < 0.5) and allow_fw
    draw = AugmentationDraw(use_mixup=use_mixup, use_fw=use_fw)
    if use_mixup:
        lam = float(rng.beta(mix_alpha, mix_alpha))
        draw.mix_lambda = float(np.clip(lam, 1e-6, 1.0 - 1e-6))
        if batch_size is not None:
            draw.permutation = rng.permutation(batch_size)
    if use_fw:
        draw.fw_factor = float(rng.uniform(*fw_range))
    return draw
