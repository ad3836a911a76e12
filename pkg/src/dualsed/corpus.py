"""Synthetic polyphonic audio corpus with strong / weak / unlabeled splits.

Every clip is a mixture of parametric event primitives (tones, chirps,
band-limited noise bursts, AM tones, harmonic stacks) over a low-level
noise floor. Ground truth is recorded exactly during synthesis, then
stripped down for the weak and unlabeled streams. Generation is fully
deterministic given the seed.

Manifests use DESED-style tab-separated text:
    strong.tsv     filename <tab> onset <tab> offset <tab> event_label
    weak.tsv       filename <tab> comma-separated event labels
    unlabeled.tsv  filename
plus a corpus.yaml with class names, sample rate and split assignments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import yaml
from scipy.io import wavfile
from scipy.signal import butter, resample_poly, sosfilt

from .exceptions import ConfigurationError, ManifestError


class Kind(str, Enum):
    STRONG = "strong"
    WEAK = "weak"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class EventAnnotation:
    class_id: int
    onset: float
    offset: float

    def __post_init__(self):
        if self.onset < 0 or self.offset <= self.onset:
            raise ManifestError(f"invalid event interval [{self.onset}, {self.offset})")


@dataclass
class AnnotatedClip:
    clip_id: str
    samples: np.ndarray
    sample_rate: int
    duration: float
    kind: Kind
    events: list[EventAnnotation] = field(default_factory=list)
    tags: frozenset[int] = frozenset()


@dataclass
class ManifestEntry:
    filename: str
    kind: Kind
    events: list[EventAnnotation] = field(default_factory=list)
    tags: frozenset[int] = frozenset()


@dataclass
class CorpusManifest:
    root: Path
    entries: list[ManifestEntry]
    class_names: list[str]
    sample_rate: int
    clip_seconds: float
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestError("duplicate class names")

    def entries_of(self, kind: Kind) -> list[ManifestEntry]:
        return [e for e in self.entries if e.kind is kind]


@dataclass
class CorpusSpec:
    n_classes: int = 3
    strong: int = 50
    weak: int = 40
    unlabeled: int = 110
    clip_seconds: float = 10.0
    seed: int = 7
    min_events: int = 1
    max_events: int = 4
    event_dur_range: tuple[float, float] = (0.3, 3.0)
    noise_floor_db: float = -30.0
    event_peak: float = 0.3
    # extra noise-floor energy concentrated in masking_band (dB relative to
    # event_peak, like noise_floor_db), so the class living there is much
    # harder than the others and the validation PSDS (mean minus std across
    # classes) cannot saturate early
    masking_band: tuple[float, float] = (1760.0, 2640.0)
    masking_floor_db: float = -20.0
    val_fraction: float = 0.3
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.clip_seconds <= 0:
            raise ConfigurationError("clip_seconds must be > 0")
        if min(self.strong, self.weak, self.unlabeled) < 0:
            raise ConfigurationError("stream counts must be >= 0")


# Each class is a (primitive, base frequency) combination; primitives cycle
# first, then the base frequency steps up, so consecutive class ids are
# maximally distinct.
_PRIMITIVES = ("tone", "chirp", "noise_burst", "am_tone", "harmonic_stack")
_BASE_FREQS = (440.0, 660.0, 990.0, 1480.0)
MAX_CLASSES = len(_PRIMITIVES) * len(_BASE_FREQS)


def class_name(class_id: int) -> str:
    prim = _PRIMITIVES[class_id % len(_PRIMITIVES)]
    variant = class_id // len(_PRIMITIVES)
    return f"{prim}_{int(_BASE_FREQS[variant])}hz"


def _render_event(class_id: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    prim = _PRIMITIVES[class_id % len(_PRIMITIVES)]
    base = _BASE_FREQS[class_id // len(_PRIMITIVES)]
    t = np.arange(n) / sr
    dur = n / sr
    if prim == "tone":
        x = np.sin(2 * np.pi * base * t)
    elif prim == "chirp":
        f1 = base * 2.5
        x = np.sin(2 * np.pi * (base * t + (f1 - base) / (2 * dur) * t**2))
    elif prim == "noise_burst":
        lo = min(base * 4.0, 5500.0)
        hi = min(base * 6.0, 7600.0)
        sos = butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
        peak = np.max(np.abs(x))
        if peak > 0:
            x = x / peak
    elif prim == "am_tone":
        mod = 4.0 + (class_id % 3)
        x = np.sin(2 * np.pi * base * t) * (0.5 + 0.5 * np.sin(2 * np.pi * mod * t))
    else:  # harmonic_stack
        x = sum(np.sin(2 * np.pi * k * base * t) / k for k in range(1, 5))
        x = x / np.max(np.abs(x))
    # 10 ms attack/release ramps to avoid clicks
    ramp = min(int(0.01 * sr), n // 2)
    if ramp > 0:
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        x = x * env
    return x.astype(np.float64)


def _synthesize_clip(spec: CorpusSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[EventAnnotation]]:
    sr = spec.sample_rate
    n = round(spec.clip_seconds * sr)
    noise_std = spec.event_peak * 10.0 ** (spec.noise_floor_db / 20.0)
    clip = noise_std * rng.standard_normal(n)
    mask_std = spec.event_peak * 10.0 ** (spec.masking_floor_db / 20.0)
    if mask_std > 0:
        sos = butter(4, list(spec.masking_band), btype="bandpass", fs=sr, output="sos")
        band = sosfilt(sos, rng.standard_normal(n))
        band_std = float(np.std(band))
        if band_std > 0:
            clip = clip + (mask_std / band_std) * band
    n_events = int(rng.integers(spec.min_events, spec.max_events + 1))
    events = []
    for _ in range(n_events):
        cid = int(rng.integers(spec.n_classes))
        dur = float(rng.uniform(*spec.event_dur_range))
        dur = min(dur, spec.clip_seconds)
        onset = float(rng.uniform(0.0, spec.clip_seconds - dur))
        amp = float(rng.uniform(0.5, 1.0)) * spec.event_peak
        i0 = round(onset * sr)
        i1 = min(round((onset + dur) * sr), n)
        clip[i0:i1] += amp * _render_event(cid, i1 - i0, sr, rng)
        events.append(EventAnnotation(class_id=cid, onset=onset, offset=onset + dur))
    peak = np.max(np.abs(clip))
    if peak > 0.99:
        clip = clip * (0.99 / peak)
    events.sort(key=lambda e: (e.onset, e.class_id))
    return clip, events


def _write_wav(path: Path, samples: np.ndarray, sr: int) -> None:
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sr, pcm)


def read_wav(path: Path, target_rate: int) -> np.ndarray:
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32767.0
    else:
        x = data.astype(np.float32)
    if x.ndim > 1:
        x = x.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(rate, target_rate)
        x = resample_poly(x, target_rate // g, rate // g).astype(np.float32)
    return x


def synthesize_toy_corpus(spec: CorpusSpec, out_dir: Path) -> CorpusManifest:
    """Generate a toy corpus on disk and return its manifest."""
    if spec.n_classes > MAX_CLASSES:
        raise ConfigurationError(
            f"n_classes={spec.n_classes} exceeds the {MAX_CLASSES} available primitives"
        )
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    entries: list[ManifestEntry] = []
    counts = [(Kind.STRONG, spec.strong), (Kind.WEAK, spec.weak), (Kind.UNLABELED, spec.unlabeled)]
    for kind, count in counts:
        for i in range(count):
            clip, events = _synthesize_clip(spec, rng)
            fname = f"{kind.value}_{i:05d}.wav"
            _write_wav(audio_dir / fname, clip, spec.sample_rate)
            if kind is Kind.STRONG:
                entries.append(ManifestEntry(fname, kind, events=events))
            elif kind is Kind.WEAK:
                tags = frozenset(e.class_id for e in events)
                entries.append(ManifestEntry(fname, kind, tags=tags))
            else:
                entries.append(ManifestEntry(fname, kind))

    strong_names = [e.filename for e in entries if e.kind is Kind.STRONG]
    n_val = round(len(strong_names) * spec.val_fraction)
    val = strong_names[len(strong_names) - n_val :]
    train = strong_names[: len(strong_names) - n_val]
    half = len(train) // 2
    splits = {
        "strong_real": train[:half],
        "strong_synth": train[half:],
        "strong_val": val,
    }
    manifest = CorpusManifest(
        root=out_dir,
        entries=entries,
        class_names=[class_name(c) for c in range(spec.n_classes)],
        sample_rate=spec.sample_rate,
        clip_seconds=spec.clip_seconds,
        splits=splits,
    )
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: CorpusManifest) -> None:
    root = Path(manifest.root)
    root.mkdir(parents=True, exist_ok=True)
    names = manifest.class_names
    with open(root / "strong.tsv", "w", encoding="utf-8") as f:
        f.write("filename\tonset\toffset\tevent_label\n")
        for e in manifest.entries_of(Kind.STRONG):
            for ev in e.events:
                f.write(f"{e.filename}\t{ev.onset!r}\t{ev.offset!r}\t{names[ev.class_id]}\n")
    with open(root / "weak.tsv", "w", encoding="utf-8") as f:
        f.write("filename\tevent_labels\n")
        for e in manifest.entries_of(Kind.WEAK):
            tags = ",".join(names[c] for c in sorted(e.tags))
            f.write(f"{e.filename}\t{tags}\n")
    with open(root / "unlabeled.tsv", "w", encoding="utf-8") as f:
        f.write("filename\n")
        for e in manifest.entries_of(Kind.UNLABELED):
            f.write(f"{e.filename}\n")
    meta = {
        "class_names": list(names),
        "sample_rate": manifest.sample_rate,
        "clip_seconds": manifest.clip_seconds,
        "splits": {k: list(v) for k, v in manifest.splits.items()},
    }
    with open(root / "corpus.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(meta, f, sort_keys=True)


def load_manifest(root: Path) -> CorpusManifest:
    """Load a manifest directory written by write_manifest / synthesize_toy_corpus."""
    root = Path(root)
    meta_path = root / "corpus.yaml"
    if not meta_path.exists():
        raise ManifestError(f"missing {meta_path}")
    with open(meta_path, encoding="utf-8") as f:
        meta = yaml.safe_load(f)
    names = list(meta["class_names"])
    name_to_id = {n: i for i, n in enumerate(names)}
    clip_seconds = float(meta["clip_seconds"])

    entries: list[ManifestEntry] = []

    strong_path = root / "strong.tsv"
    by_file: dict[str, list[EventAnnotation]] = {}
    for lineno, parts in _read_tsv(strong_path, 4, header="filename\tonset\toffset\tevent_label"):
        fname, onset_s, offset_s, label = parts
        try:
            onset, offset = float(onset_s), float(offset_s)
        except ValueError:
            raise ManifestError(f"{strong_path}:{lineno}: non-numeric onset/offset") from None
        if label not in name_to_id:
            raise ManifestError(f"{strong_path}:{lineno}: unknown class name {label!r}")
        if not (0 <= onset < offset):
            raise ManifestError(f"{strong_path}:{lineno}: offset must exceed onset >= 0")
        if offset > clip_seconds + 1e-9:
            raise ManifestError(f"{strong_path}:{lineno}: offset beyond clip duration")
        by_file.setdefault(fname, []).append(
            EventAnnotation(class_id=name_to_id[label], onset=onset, offset=offset)
        )
    for fname, events in by_file.items():
        events.sort(key=lambda e: (e.onset, e.class_id))
        entries.append(ManifestEntry(fname, Kind.STRONG, events=events))

    weak_path = root / "weak.tsv"
    for lineno, parts in _read_tsv(weak_path, 2, header="filename\tevent_labels"):
        fname, tag_s = parts
        tags = set()
        for label in filter(None, tag_s.split(",")):
            if label not in name_to_id:
                raise ManifestError(f"{weak_path}:{lineno}: unknown class name {label!r}")
            tags.add(name_to_id[label])
        entries.append(ManifestEntry(fname, Kind.WEAK, tags=frozenset(tags)))

    unlabeled_path = root / "unlabeled.tsv"
    for lineno, parts in _read_tsv(unlabeled_path, 1, header="filename"):
        entries.append(ManifestEntry(parts[0], Kind.UNLABELED))

    return CorpusManifest(
        root=root,
        entries=entries,
        class_names=names,
        sample_rate=int(meta["sample_rate"]),
        clip_seconds=clip_seconds,
        splits={k: list(v) for k, v in meta.get("splits", {}).items()},
    )


def _read_tsv(path: Path, arity: int, header: str):
    if not path.exists():
        raise ManifestError(f"missing {path}")
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != header:
        raise ManifestError(f"{path}:1: expected header {header!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != arity:
            raise ManifestError(f"{path}:{lineno}: expected {arity} columns, got {len(parts)}")
        yield lineno, parts


def load_clip(manifest: CorpusManifest, entry: ManifestEntry) -> AnnotatedClip:
    samples = read_wav(Path(manifest.root) / "audio" / entry.filename, manifest.sample_rate)
    return AnnotatedClip(
        clip_id=entry.filename,
        samples=samples,
        sample_rate=manifest.sample_rate,
        duration=len(samples) / manifest.sample_rate,
        kind=entry.kind,
        events=list(entry.events),
        tags=entry.tags,
    )


def rasterize_events(
    events: list[EventAnnotation], n_frames: int, hop: float, n_classes: int
) -> np.ndarray:
    """Frame-level multi-hot targets: frame k is active for a class iff the
    event interval intersects [k*hop, (k+1)*hop)."""
    target = np.zeros((n_frames, n_classes), dtype=np.float32)
    for ev in events:
        k0 = max(0, int(math.floor(ev.onset / hop)))
        k1 = min(n_frames, int(math.ceil(ev.offset / hop)))
        target[k0:k1, ev.class_id] = 1.0
    return target


@dataclass
class CompositeBatch:
    """One training batch: the four streams concatenated in fixed order
    (strong_real, strong_synth, weak, unlabeled) with per-item kind masks."""

    clip_ids: list[str]
    waveforms: np.ndarray  # (B, N)
    kinds: list[Kind]
    strong_mask: np.ndarray  # (B,) bool
    weak_mask: np.ndarray
    unlabeled_mask: np.ndarray
    strong_targets: np.ndarray  # (B, T_out, C), zero rows for non-strong items
    weak_targets: np.ndarray  # (B, C), zero rows for non-weak items

    @property
    def size(self) -> int:
        return len(self.clip_ids)


class _StreamCycler:
    """Cycles a clip list with an independent per-epoch reshuffle."""

    def __init__(self, clips: list[AnnotatedClip], rng: np.random.Generator):
        self.clips = clips
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def take(self, n: int) -> list[AnnotatedClip]:
        out = []
        for _ in range(n):
            if self.pos >= len(self.order):
                self.order = list(self.rng.permutation(len(self.clips)))
                self.pos = 0
            out.append(self.clips[self.order[self.pos]])
            self.pos += 1
        return out

    def get_state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "order": list(self.order),
            "pos": self.pos,
        }

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = list(state["order"])
        self.pos = state["pos"]


STREAM_NAMES = ("strong_real", "strong_synth", "weak", "unlabeled")


class BatchComposer:
    """Draws CompositeBatches from the four data streams in fixed proportions."""

    def __init__(
        self,
        streams: dict[str, list[AnnotatedClip]],
        sizes: dict[str, int],
        n_classes: int,
        n_out_frames: int,
        hop_out: float,
        rng: np.random.Generator,
    ):
        for name in STREAM_NAMES:
            if sizes.get(name, 0) > 0 and not streams.get(name):
                raise ConfigurationError(f"stream {name!r} is empty but {sizes[name]} items requested")
        self.sizes = {name: int(sizes.get(name, 0)) for name in STREAM_NAMES}
        self.n_classes = n_classes
        self.n_out_frames = n_out_frames
        self.hop_out = hop_out
        seeds = rng.spawn(len(STREAM_NAMES))
        self.cyclers = {
            name: _StreamCycler(streams.get(name, []), child)
            for name, child in zip(STREAM_NAMES, seeds)
        }

    @property
    def batch_size(self) -> int:
        return sum(self.sizes.values())

    def steps_per_epoch(self) -> int:
        steps = 1
        for name in STREAM_NAMES:
            if self.sizes[name] > 0:
                steps = max(steps, math.ceil(len(self.cyclers[name].clips) / self.sizes[name]))
        return steps

    def next_batch(self) -> CompositeBatch:
        clips: list[AnnotatedClip] = []
        for name in STREAM_NAMES:
            clips.extend(self.cyclers[name].take(self.sizes[name]))
        b = len(clips)
        n = len(clips[0].samples)
        waves = np.zeros((b, n), dtype=np.float32)
        strong_t = np.zeros((b, self.n_out_frames, self.n_classes), dtype=np.float32)
        weak_t = np.zeros((b, self.n_classes), dtype=np.float32)
        kinds, ids = [], []
        for i, clip in enumerate(clips):
            if len(clip.samples) != n:
                raise ConfigurationError("all clips in a batch must share one length")
            waves[i] = clip.samples
            kinds.append(clip.kind)
            ids.append(clip.clip_id)
            if clip.kind is Kind.STRONG:
                strong_t[i] = rasterize_events(clip.events, self.n_out_frames, self.hop_out, self.n_classes)
            elif clip.kind is Kind.WEAK:
                for c in clip.tags:
                    weak_t[i, c] = 1.0
        kinds_arr = np.array([k.value for k in kinds])
        return CompositeBatch(
            clip_ids=ids,
            waveforms=waves,
            kinds=kinds,
            strong_mask=kinds_arr == Kind.STRONG.value,
            weak_mask=kinds_arr == Kind.WEAK.value,
            unlabeled_mask=kinds_arr == Kind.UNLABELED.value,
            strong_targets=strong_t,
            weak_targets=weak_t,
        )

    def get_state(self) -> dict:
        return {name: c.get_state() for name, c in self.cyclers.items()}

    def set_state(self, state: dict) -> None:
        for name, c in self.cyclers.items():
            c.set_state(state[name])
