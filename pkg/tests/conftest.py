import dataclasses

import pytest

from dualsed.config import RunConfig
from dualsed.corpus import CorpusSpec, load_manifest, synthesize_toy_corpus
from dualsed.model import EncoderSpec, ModelConfig


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small deterministic corpus shared across trainer/cli tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    spec = CorpusSpec(
        n_classes=3, strong=10, weak=6, unlabeled=8, clip_seconds=2.0, seed=11,
        noise_floor_db=-30.0,
    )
    manifest = synthesize_toy_corpus(spec, root)
    return spec, manifest


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    _, manifest = tiny_corpus
    return load_manifest(manifest.root)


def tiny_model_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        encoder=EncoderSpec(n_blocks=1, width=32, n_heads=2),
        cnn_channels=(4, 4, 8, 8, 8, 8, 8),
        rnn_hidden=16,
        rnn_layers=1,
        merge_dim=32,
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def tiny_run_config(corpus_spec: CorpusSpec, corpus_dir, out_dir, **stage_overrides) -> RunConfig:
    cfg = RunConfig(
        seed=13,
        out_dir=str(out_dir),
        corpus_dir=str(corpus_dir),
        corpus=corpus_spec,
        model=tiny_model_config(),
    )
    cfg.batch = dataclasses.replace(cfg.batch, strong_real=2, strong_synth=2, weak=2, unlabeled=2)
    cfg.frozen = dataclasses.replace(cfg.frozen, total_epochs=2, r_eps=1)
    cfg.finetune = dataclasses.replace(
        cfg.finetune, total_epochs=2, r_eps=1, **stage_overrides
    )
    return cfg
