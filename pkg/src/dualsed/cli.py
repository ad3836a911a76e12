"""Command-line surface: gen-data, train, evaluate, export-embeddings.

Every command is driven by one YAML config (plus dotted-path overrides via
--set) and echoes the resolved config into the output directory. Exit
codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, apply_overrides, load_config, save_config
from .corpus import Kind, load_clip, load_manifest, synthesize_toy_corpus
from .exceptions import ConfigurationError, DualSedError
from .metrics import decode_over_thresholds, psds
from .model import build_model, export_frame_embeddings
from .schedules import Stage
from .trainer import (
    FeatureProvider,
    finetune_stage,
    load_checkpoint,
    predict_strong,
    train_frozen_stage,
    validate_predictions,
)


def _resolved_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.corpus = dataclasses.replace(cfg.corpus, seed=args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    save_config(cfg, out_dir / "resolved_config.yaml")


def cmd_gen_data(args) -> int:
    cfg = _resolved_config(args)
    corpus_dir = Path(cfg.corpus_dir)
    if corpus_dir.exists() and any(corpus_dir.iterdir()) and not args.force:
        raise ConfigurationError(
            f"output directory {corpus_dir} is not empty (pass --force to overwrite)"
        )
    manifest = synthesize_toy_corpus(cfg.corpus, corpus_dir)
    _echo_config(cfg, corpus_dir)
    counts = {k.value: len(manifest.entries_of(k)) for k in Kind}
    print(
        f"wrote {len(manifest.entries)} clips ({counts}) with "
        f"{len(manifest.class_names)} classes to {corpus_dir}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    manifest = load_manifest(Path(cfg.corpus_dir))
    stage = Stage(args.stage)
    out_dir = Path(cfg.out_dir) / stage.value
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    resume = Path(args.resume) if args.resume else None
    if stage is Stage.FROZEN:
        result = train_frozen_stage(cfg, manifest, out_dir, resume=resume)
    else:
        warm = Path(args.warm_start) if args.warm_start else None
        result = finetune_stage(
            cfg, manifest, out_dir, warm, allow_cold_start=args.allow_cold_start, resume=resume
        )
    print(
        f"stage {stage.value}: best validation metric {result['best_metric']:.4f} "
        f"at epoch {result['best_epoch']} -> {result['best_ckpt']}"
    )
    return 0


def _split_clips(manifest, split: str):
    if split == "val":
        names = set(manifest.splits.get("strong_val", []))
    elif split == "train-strong":
        names = set(manifest.splits.get("strong_real", [])) | set(
            manifest.splits.get("strong_synth", [])
        )
    else:
        raise ConfigurationError(f"unknown split {split!r}")
    clips = [load_clip(manifest, e) for e in manifest.entries if e.filename in names]
    if not clips:
        raise ConfigurationError(f"split {split!r} is empty")
    return clips


def cmd_evaluate(args) -> int:
    cfg = _resolved_config(args)
    manifest = load_manifest(Path(cfg.corpus_dir))
    n_classes = len(manifest.class_names)
    clips = _split_clips(manifest, args.split)

    state = load_checkpoint(Path(args.ckpt))
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, n_classes, cfg.features)
    model.load_state_dict(state["model"])
    provider = FeatureProvider(cfg.features, cfg.model.encoder.kind)

    strong_by_clip = {c.clip_id: predict_strong(model, provider, c) for c in clips}
    truth = {c.clip_id: list(c.events) for c in clips}
    scores = validate_predictions(strong_by_clip, truth, cfg, n_classes)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    hop = cfg.features.hop_out
    detections_tsv = out_dir / f"detections_{args.split}.tsv"
    mid_thr = min(cfg.eval.psds1.thresholds, key=lambda t: abs(t - 0.5))
    with open(detections_tsv, "w", encoding="utf-8") as f:
        f.write("filename\tonset\toffset\tevent_label\n")
        for clip_id, strong in sorted(strong_by_clip.items()):
            for ev in decode_over_thresholds(strong, [mid_thr], cfg.eval.median_len, hop)[mid_thr]:
                f.write(
                    f"{clip_id}\t{ev.onset:.3f}\t{ev.offset:.3f}\t"
                    f"{manifest.class_names[ev.class_id]}\n"
                )
    report = {
        "split": args.split,
        "psds1": scores["psds1"],
        "psds2": scores["psds2"],
        "event_f1": scores["event_f1"],
        "metric": scores["metric"],
        "detections_tsv": str(detections_tsv),
    }
    report_path = Path(args.report) if args.report else out_dir / f"report_{args.split}.json"
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    print(json.dumps(report, indent=2))
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _resolved_config(args)
    manifest = load_manifest(Path(cfg.corpus_dir))
    n_classes = len(manifest.class_names)
    state = load_checkpoint(Path(args.ckpt))
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, n_classes, cfg.features)
    model.load_state_dict(state["model"])
    clips = [load_clip(manifest, e) for e in manifest.entries]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 0]))
    rows = export_frame_embeddings(
        model, clips, rng, Path(args.out), feature_cfg=cfg.features, class_names=manifest.class_names
    )
    print(f"wrote {rows} embedding rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualsed", description="Two-stage semi-supervised sound event detection experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_out=True):
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
        p.add_argument("--seed", type=int, default=None)
        if with_out:
            p.add_argument("--out", type=Path, default=None, help="override out_dir")

    p = sub.add_parser("gen-data", help="synthesize the toy corpus")
    common(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", choices=[s.value for s in Stage], required=True)
    p.add_argument("--warm-start", default=None, help="stage-1 checkpoint for fine-tuning")
    p.add_argument("--allow-cold-start", action="store_true",
                   help="permit fine-tuning without a warm start (ablation)")
    p.add_argument("--resume", default=None, help="continue from a saved checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["val", "train-strong"], default="val")
    p.add_argument("--report", default=None, help="path for the JSON report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="dump one aligned encoder frame per clip")
    common(p, with_out=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", type=Path, required=True, help="destination TSV")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
