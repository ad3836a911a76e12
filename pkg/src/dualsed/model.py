"""Dual-branch detection network.

A small CNN stack turns 16 ms log-mel frames into 64 ms feature frames
(total time stride 4, frequency fully pooled away). A pluggable pre-norm
transformer encoder runs in parallel on its own front end, its output is
length-aligned to the CNN sequence with variable-window average pooling,
and the merged sequence feeds a bidirectional GRU with per-frame sigmoid
(strong) and class-wise attention-pooled (weak) heads.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import AnnotatedClip, Kind
from .exceptions import ConfigurationError
from .features import FeatureConfig, MelSpectrogram, logmel_cnn, logmel_encoder
from .schedules import EncoderKind


@dataclass
class EncoderSpec:
    kind: EncoderKind = EncoderKind.FRAME_WISE
    n_blocks: int = 2
    width: int = 256
    n_heads: int = 4
    init: str | None = None  # None = random init, else checkpoint path
    patch_size: int = 16

    def __post_init__(self):
        self.kind = EncoderKind(self.kind)
        if self.width % self.n_heads != 0:
            raise ConfigurationError("encoder width must be divisible by n_heads")

    @property
    def token_resolution(self) -> float:
        return 0.040 if self.kind is EncoderKind.FRAME_WISE else 0.160


@dataclass
class ModelConfig:
    # defaults sized for single-process CPU training on the toy corpus; the
    # CNN/RNN trunk is deliberately lean so the encoder branch carries real
    # capacity once it unfreezes
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(width=64))
    cnn_channels: tuple[int, ...] = (4, 8, 8, 16, 16, 16, 16)
    cnn_time_pools: tuple[int, ...] = (2, 2, 1, 1, 1, 1, 1)
    cnn_freq_pools: tuple[int, ...] = (2, 2, 2, 2, 2, 2, 2)
    rnn_hidden: int = 32
    rnn_layers: int = 2
    merge_dim: int = 64

    def __post_init__(self):
        if not (len(self.cnn_channels) == len(self.cnn_time_pools) == len(self.cnn_freq_pools)):
            raise ConfigurationError("CNN channel/pool lists must have equal length")


@dataclass
class PredictionPair:
    strong: torch.Tensor  # (B, T_out, C) posteriors
    weak: torch.Tensor  # (B, C) posteriors
    frame_hop_out: float = 0.064


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, time_pool, freq_pool):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(num_groups=math.gcd(4, c_out), num_channels=c_out)
        self.act = nn.ReLU()
        self.pool = nn.AvgPool2d((time_pool, freq_pool)) if (time_pool, freq_pool) != (1, 1) else None

    def forward(self, x):
        x = self.act(self.norm(self.conv(x)))
        if self.pool is not None:
            x = self.pool(x)
        return x


class CnnFrontend(nn.Module):
    """(B, T, F) log-mel -> (B, T // time_stride, D_cnn)."""

    def __init__(self, cfg: ModelConfig, n_mels: int):
        super().__init__()
        if int(np.prod(cfg.cnn_freq_pools)) != n_mels:
            raise ConfigurationError("frequency pools must multiply to the mel bin count")
        self.time_stride = int(np.prod(cfg.cnn_time_pools))
        blocks = []
        c_in = 1
        for c_out, tp, fp in zip(cfg.cnn_channels, cfg.cnn_time_pools, cfg.cnn_freq_pools):
            blocks.append(ConvBlock(c_in, c_out, tp, fp))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = c_in

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[1] < self.time_stride:
            raise ConfigurationError(
                f"input of {mel.shape[1]} frames is shorter than the receptive field"
            )
        x = self.blocks(mel.unsqueeze(1))  # (B, C, T', 1)
        return x.squeeze(-1).transpose(1, 2)


def _sinusoidal_positions(n: int, dim: int, dtype, device) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    idx = torch.arange(0, dim, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, idx / dim)
    enc = torch.zeros(n, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angle)
    enc[:, 1::2] = torch.cos(angle)
    return enc.to(dtype=dtype, device=device)


class TransformerBlock(nn.Module):
    def __init__(self, width, n_heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class AudioEncoder(nn.Module):
    """Pre-norm transformer over frame or patch tokens.

    Patch-wise inputs are cut into patch_size x patch_size time-frequency
    patches; the output is reduced to one vector per time column by
    averaging the frequency patches.
    """

    def __init__(self, spec: EncoderSpec, n_mels: int):
        super().__init__()
        self.spec = spec
        self.n_mels = n_mels
        p = spec.patch_size
        in_dim = n_mels if spec.kind is EncoderKind.FRAME_WISE else p * p
        self.tokenizer = nn.Linear(in_dim, spec.width)
        self.blocks = nn.ModuleList(TransformerBlock(spec.width, spec.n_heads) for _ in range(spec.n_blocks))
        self.out_norm = nn.LayerNorm(spec.width)
        self.out_dim = spec.width

    def tokenize(self, mel: torch.Tensor) -> tuple[torch.Tensor, int]:
        """Returns (tokens (B, N, width-input), freq groups per time step)."""
        if mel.shape[-1] != self.n_mels:
            raise ConfigurationError(
                f"expected {self.n_mels} mel bins, got {mel.shape[-1]}"
            )
        if self.spec.kind is EncoderKind.FRAME_WISE:
            return mel, 1
        p = self.spec.patch_size
        b, t, f = mel.shape
        cols, fpatch = t // p, f // p
        x = mel[:, : cols * p, :]
        x = x.reshape(b, cols, p, fpatch, p)  # (B, cols, t-in-patch, fpatch, f-in-patch)
        x = x.permute(0, 1, 3, 2, 4).reshape(b, cols * fpatch, p * p)
        return x, fpatch

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        tokens, fpatch = self.tokenize(mel)
        x = self.tokenizer(tokens)
        x = x + _sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        for block in self.blocks:
            x = block(x)
        x = self.out_norm(x)
        if fpatch > 1:
            b, n, d = x.shape
            x = x.reshape(b, n // fpatch, fpatch, d).mean(dim=2)
        return x


def encoder_forward(encoder: AudioEncoder, mel: torch.Tensor, frozen: bool) -> torch.Tensor:
    """Run the encoder; when frozen, no gradients flow and normalization
    statistics are not updated."""
    if frozen:
        encoder.eval()
        with torch.no_grad():
            return encoder(mel)
    return encoder(mel)


@lru_cache(maxsize=64)
def _pool_window_matrix(t: int, target: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 membership matrix (target, t) plus per-row window sizes."""
    if target <= 0:
        raise ConfigurationError("target length must be positive")
    if t <= 0:
        raise ConfigurationError("input length must be positive")
    mat = np.zeros((target, t), dtype=np.float64)
    sizes = np.zeros(target, dtype=np.float64)
    for i in range(target):
        lo = (i * t) // target
        hi = -((-(i + 1) * t) // target)  # ceil((i+1)*t/target)
        mat[i, lo:hi] = 1.0
        sizes[i] = hi - lo
    return mat, sizes


def adaptive_pool_align(seq: torch.Tensor, target_len: int) -> torch.Tensor:
    """Variable-window average pooling that maps length T onto target_len.

    Output row i is the mean of input rows [floor(i*T/T'), ceil((i+1)*T/T')).
    Windows are contiguous, cover every input row, and may overlap; for
    T < T' windows of size one repeat rows. Differentiable.
    """
    squeeze = seq.dim() == 2
    if squeeze:
        seq = seq.unsqueeze(0)
    t = seq.shape[1]
    if t == target_len:
        out = seq
    else:
        mat, sizes = _pool_window_matrix(t, target_len)
        weight = torch.from_numpy(mat).to(dtype=seq.dtype, device=seq.device)
        div = torch.from_numpy(sizes).to(dtype=seq.dtype, device=seq.device)
        out = torch.matmul(weight, seq) / div[None, :, None]
    return out.squeeze(0) if squeeze else out


class MergeLayer(nn.Module):
    """Feature concatenation followed by a learned linear projection."""

    def __init__(self, d_cnn: int, d_enc: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(d_cnn + d_enc, d_out)

    def forward(self, cnn_seq: torch.Tensor, enc_seq: torch.Tensor) -> torch.Tensor:
        if cnn_seq.shape[1] != enc_seq.shape[1]:
            raise ConfigurationError(
                f"sequence length mismatch: {cnn_seq.shape[1]} vs {enc_seq.shape[1]}"
            )
        return self.proj(torch.cat([cnn_seq, enc_seq], dim=-1))


class RnnHeads(nn.Module):
    """BiGRU context model with per-frame sigmoid (strong) and class-wise
    softmax attention pooling over the strong-head logits (weak)."""

    def __init__(self, d_in: int, hidden: int, n_layers: int, n_classes: int):
        super().__init__()
        self.rnn = nn.GRU(d_in, hidden, num_layers=n_layers, bidirectional=True, batch_first=True)
        self.strong_head = nn.Linear(2 * hidden, n_classes)
        self.attn_head = nn.Linear(2 * hidden, n_classes)

    def forward(self, merged: torch.Tensor, frame_hop_out: float) -> PredictionPair:
        if merged.shape[1] < 1:
            raise ConfigurationError("empty sequence")
        ctx, _ = self.rnn(merged)
        strong_logits = self.strong_head(ctx)  # (B, T, C)
        attn = torch.softmax(self.attn_head(ctx), dim=1)
        weak_logits = (attn * strong_logits).sum(dim=1)
        return PredictionPair(
            strong=torch.sigmoid(strong_logits),
            weak=torch.sigmoid(weak_logits),
            frame_hop_out=frame_hop_out,
        )


class SedModel(nn.Module):
    def __init__(self, cfg: ModelConfig, n_classes: int, n_mels: int = 128, hop_out: float = 0.064):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.hop_out = hop_out
        self.cnn = CnnFrontend(cfg, n_mels)
        self.encoder = AudioEncoder(cfg.encoder, n_mels)
        self.merge = MergeLayer(self.cnn.out_dim, self.encoder.out_dim, cfg.merge_dim)
        self.heads = RnnHeads(cfg.merge_dim, cfg.rnn_hidden, cfg.rnn_layers, n_classes)

    def aligned_encoder_seq(self, enc_mel: torch.Tensor, target_len: int, frozen: bool) -> torch.Tensor:
        enc_seq = encoder_forward(self.encoder, enc_mel, frozen)
        return adaptive_pool_align(enc_seq, target_len)

    def forward(self, cnn_mel: torch.Tensor, enc_mel: torch.Tensor, encoder_frozen: bool = False) -> PredictionPair:
        cnn_seq = self.cnn(cnn_mel)
        enc_seq = self.aligned_encoder_seq(enc_mel, cnn_seq.shape[1], encoder_frozen)
        merged = self.merge(cnn_seq, enc_seq)
        return self.heads(merged, self.hop_out)


def build_model(cfg: ModelConfig, n_classes: int, feature_cfg: FeatureConfig | None = None) -> SedModel:
    feature_cfg = feature_cfg or FeatureConfig()
    model = SedModel(cfg, n_classes, n_mels=feature_cfg.n_mels, hop_out=feature_cfg.hop_out)
    if cfg.encoder.init:
        state = torch.load(cfg.encoder.init, map_location="cpu", weights_only=True)
        model.encoder.load_state_dict(state)
    return model


def pretrain_encoder(
    encoder: AudioEncoder,
    mels: list[np.ndarray],
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    mask_frac: float = 0.25,
) -> None:
    """Toy self-supervised warm-up: masked-token reconstruction of the
    encoder's own input, to emulate a pretrained initialization."""
    if epochs <= 0:
        return
    width = encoder.out_dim
    in_dim = encoder.tokenizer.in_features
    head = nn.Linear(width, in_dim)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=lr)
    encoder.train()
    for _ in range(epochs):
        order = rng.permutation(len(mels))
        for idx in order:
            mel = torch.from_numpy(np.asarray(mels[idx], dtype=np.float32)).unsqueeze(0)
            tokens, fpatch = encoder.tokenize(mel)
            mask = torch.from_numpy(rng.random(tokens.shape[1]) < mask_frac)
            masked = tokens.clone()
            masked[:, mask, :] = 0.0
            x = encoder.tokenizer(masked)
            x = x + _sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
            for block in encoder.blocks:
                x = block(x)
            recon = head(encoder.out_norm(x))
            if not mask.any():
                continue
            loss = ((recon[:, mask, :] - tokens[:, mask, :]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()


def export_frame_embeddings(
    model: SedModel,
    clips: list[AnnotatedClip],
    rng: np.random.Generator,
    out_path: Path,
    feature_cfg: FeatureConfig | None = None,
    class_names: list[str] | None = None,
) -> int:
    """Write one uniformly sampled aligned encoder frame vector per clip to TSV.

    Columns: clip_id, kind, class context (present classes, ';'-joined), then
    the embedding values. Returns the number of rows written.
    """
    if not clips:
        raise ConfigurationError("no clips to export")
    feature_cfg = feature_cfg or FeatureConfig()
    model.eval()
    rows = 0
    with open(out_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        for clip in clips:
            cnn_mel = logmel_cnn(clip.samples, feature_cfg)
            enc_mel = logmel_encoder(clip.samples, model.cfg.encoder.kind, feature_cfg)
            t_cnn = cnn_mel.n_frames // model.cnn.time_stride
            with torch.no_grad():
                aligned = model.aligned_encoder_seq(
                    torch.from_numpy(enc_mel.values).unsqueeze(0), t_cnn, frozen=True
                )[0]
            frame = int(rng.integers(aligned.shape[0]))
            vec = aligned[frame].numpy()
            if clip.kind is Kind.STRONG:
                present = sorted({e.class_id for e in clip.events})
            elif clip.kind is Kind.WEAK:
                present = sorted(clip.tags)
            else:
                present = []
            if class_names:
                context = ";".join(class_names[c] for c in present)
            else:
                context = ";".join(str(c) for c in present)
            writer.writerow([clip.clip_id, clip.kind.value, context] + [f"{v:.6g}" for v in vec])
            rows += 1
    return rows
