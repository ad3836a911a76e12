import json

import pytest

from conftest import tiny_run_config
from dualsed.cli import main
from dualsed.config import save_config
from dualsed.corpus import CorpusSpec


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """A config file plus generated corpus for the command tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = CorpusSpec(n_classes=3, strong=8, weak=4, unlabeled=4, clip_seconds=2.0, seed=19)
    cfg = tiny_run_config(spec, root / "corpus", root / "runs")
    cfg_path = root / "run.yaml"
    save_config(cfg, cfg_path)
    rc = main(["gen-data", "--config", str(cfg_path)])
    assert rc == 0
    return root, cfg_path


class TestGenData:
    def test_corpus_written(self, cli_workspace):
        root, _ = cli_workspace
        assert (root / "corpus" / "corpus.yaml").exists()
        assert (root / "corpus" / "resolved_config.yaml").exists()
        wavs = list((root / "corpus" / "audio").glob("*.wav"))
        assert len(wavs) == 16

    def test_refuses_nonempty_without_force(self, cli_workspace):
        _, cfg_path = cli_workspace
        assert main(["gen-data", "--config", str(cfg_path)]) == 2

    def test_force_overwrites(self, tmp_path):
        spec = CorpusSpec(n_classes=2, strong=2, weak=1, unlabeled=1, clip_seconds=1.0, seed=2)
        cfg = tiny_run_config(spec, tmp_path / "c", tmp_path / "r")
        save_config(cfg, tmp_path / "cfg.yaml")
        assert main(["gen-data", "--config", str(tmp_path / "cfg.yaml")]) == 0
        assert main(["gen-data", "--config", str(tmp_path / "cfg.yaml"), "--force"]) == 0

    def test_seed_changes_content(self, tmp_path):
        spec = CorpusSpec(n_classes=2, strong=1, weak=0, unlabeled=0, clip_seconds=1.0, seed=2)
        cfg = tiny_run_config(spec, tmp_path / "a", tmp_path / "r")
        save_config(cfg, tmp_path / "cfg.yaml")
        assert main(["gen-data", "--config", str(tmp_path / "cfg.yaml")]) == 0
        cfg2 = tiny_run_config(spec, tmp_path / "b", tmp_path / "r")
        save_config(cfg2, tmp_path / "cfg2.yaml")
        assert main(["gen-data", "--config", str(tmp_path / "cfg2.yaml"), "--seed", "3"]) == 0
        a = (tmp_path / "a" / "audio" / "strong_00000.wav").read_bytes()
        b = (tmp_path / "b" / "audio" / "strong_00000.wav").read_bytes()
        assert a != b


@pytest.fixture(scope="module")
def trained(cli_workspace):
    root, cfg_path = cli_workspace
    rc = main(["train", "--config", str(cfg_path), "--stage", "frozen"])
    assert rc == 0
    frozen_best = root / "runs" / "frozen" / "best.pt"
    assert frozen_best.exists()
    rc = main([
        "train", "--config", str(cfg_path), "--stage", "finetune",
        "--warm-start", str(frozen_best),
    ])
    assert rc == 0
    return root, cfg_path, frozen_best


class TestTrain:
    def test_pipeline_artifacts(self, trained):
        root, _, _ = trained
        for stage in ("frozen", "finetune"):
            out = root / "runs" / stage
            assert (out / "best.pt").exists()
            assert (out / "last.pt").exists()
            assert (out / "train_log.jsonl").exists()
            assert (out / "resolved_config.yaml").exists()

    def test_finetune_without_warm_start_is_config_error(self, cli_workspace):
        _, cfg_path = cli_workspace
        rc = main(["train", "--config", str(cfg_path), "--stage", "finetune"])
        assert rc == 2

    def test_cold_start_flag(self, cli_workspace, tmp_path):
        _, cfg_path = cli_workspace
        rc = main([
            "train", "--config", str(cfg_path), "--stage", "finetune",
            "--allow-cold-start", "--out", str(tmp_path / "cold"),
        ])
        assert rc == 0

    def test_log_is_jsonl(self, trained):
        root, _, _ = trained
        lines = (root / "runs" / "frozen" / "train_log.jsonl").read_text().splitlines()
        assert lines
        for line in lines:
            json.loads(line)


class TestEvaluate:
    def test_report_keys_and_detections(self, trained, tmp_path):
        root, cfg_path, _ = trained
        ckpt = root / "runs" / "finetune" / "best.pt"
        report_path = tmp_path / "report.json"
        rc = main([
            "evaluate", "--config", str(cfg_path), "--ckpt", str(ckpt),
            "--split", "val", "--report", str(report_path),
        ])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert set(report) >= {"psds1", "psds2", "event_f1", "metric"}
        assert 0.0 <= report["psds1"] <= 1.0
        detections = (root / "runs" / "detections_val.tsv").read_text().splitlines()
        assert detections[0] == "filename\tonset\toffset\tevent_label"

    def test_missing_checkpoint_is_runtime_error(self, cli_workspace):
        _, cfg_path = cli_workspace
        rc = main(["evaluate", "--config", str(cfg_path), "--ckpt", "/nonexistent.pt"])
        assert rc == 3

    def test_evaluate_frozen_checkpoint(self, trained):
        root, cfg_path, _ = trained
        ckpt = root / "runs" / "frozen" / "best.pt"
        rc = main(["evaluate", "--config", str(cfg_path), "--ckpt", str(ckpt), "--split", "val"])
        assert rc == 0


class TestExportEmbeddings:
    def test_rows_match_clips(self, trained, tmp_path):
        root, cfg_path, _ = trained
        ckpt = root / "runs" / "frozen" / "best.pt"
        out = tmp_path / "emb.tsv"
        rc = main([
            "export-embeddings", "--config", str(cfg_path), "--ckpt", str(ckpt),
            "--out", str(out),
        ])
        assert rc == 0
        assert len(out.read_text().splitlines()) == 16


class TestOverridesAndErrors:
    def test_bad_override_exit_code(self, cli_workspace):
        _, cfg_path = cli_workspace
        rc = main(["gen-data", "--config", str(cfg_path), "--set", "nope=1", "--force"])
        assert rc == 2

    def test_resume_continues(self, trained, tmp_path):
        root, cfg_path, _ = trained
        last = root / "runs" / "frozen" / "last.pt"
        rc = main([
            "train", "--config", str(cfg_path), "--stage", "frozen",
            "--resume", str(last), "--out", str(tmp_path / "resumed"),
        ])
        assert rc == 0
