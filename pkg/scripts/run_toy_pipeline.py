#!/usr/bin/env python3
"""End-to-end toy experiment: synthesize the corpus, train stage 1 against the
frozen encoder, fine-tune from the stage-1 checkpoint, and (optionally) run a
cold-start fine-tune ablation. Writes a JSON summary next to the checkpoints.

Usage:
    python3 scripts/run_toy_pipeline.py --out runs/toy [--config cfg.yaml]
        [--set key=value ...] [--skip-cold-start]
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

from dualsed.config import RunConfig, apply_overrides, load_config, save_config
from dualsed.corpus import load_manifest, synthesize_toy_corpus
from dualsed.trainer import finetune_stage, train_frozen_stage


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/toy"))
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--skip-cold-start", action="store_true")
    args = parser.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    cfg = dataclasses.replace(
        cfg, out_dir=str(args.out), corpus_dir=str(args.out / "corpus")
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.yaml")

    corpus_dir = Path(cfg.corpus_dir)
    if (corpus_dir / "corpus.yaml").exists():
        manifest = load_manifest(corpus_dir)
        print(f"reusing corpus at {corpus_dir} ({len(manifest.entries)} clips)")
    else:
        t0 = time.time()
        manifest = synthesize_toy_corpus(cfg.corpus, corpus_dir)
        print(f"synthesized {len(manifest.entries)} clips in {time.time() - t0:.1f}s")

    summary: dict = {"config": str(out / "resolved_config.yaml")}

    t0 = time.time()
    frozen = train_frozen_stage(cfg, manifest, out / "frozen")
    summary["frozen"] = {
        "best_metric": frozen["best_metric"],
        "best_epoch": frozen["best_epoch"],
        "best_f1": max(h["event_f1"] for h in frozen["history"]),
        "seconds": round(time.time() - t0, 1),
        "history": frozen["history"],
    }
    print(f"stage 1 best metric {frozen['best_metric']:.4f} "
          f"(epoch {frozen['best_epoch']}, {summary['frozen']['seconds']}s)")

    t0 = time.time()
    warm = finetune_stage(cfg, manifest, out / "finetune", frozen["best_ckpt"])
    summary["finetune"] = {
        "best_metric": warm["best_metric"],
        "best_epoch": warm["best_epoch"],
        "best_f1": max(h["event_f1"] for h in warm["history"]),
        "seconds": round(time.time() - t0, 1),
        "history": warm["history"],
    }
    print(f"stage 2 best metric {warm['best_metric']:.4f} "
          f"(epoch {warm['best_epoch']}, {summary['finetune']['seconds']}s)")

    if not args.skip_cold_start:
        t0 = time.time()
        cold = finetune_stage(
            cfg, manifest, out / "finetune_cold", None, allow_cold_start=True
        )
        summary["finetune_cold"] = {
            "best_metric": cold["best_metric"],
            "best_epoch": cold["best_epoch"],
            "best_f1": max(h["event_f1"] for h in cold["history"]),
            "seconds": round(time.time() - t0, 1),
            "history": cold["history"],
        }
        print(f"cold-start best metric {cold['best_metric']:.4f} "
              f"(epoch {cold['best_epoch']}, {summary['finetune_cold']['seconds']}s)")

    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    print(f"summary -> {out / 'summary.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
