"""End-to-end CLI behaviour: manifests, config validation, and the
prepare/train/generate/eval pipeline on a tiny synthetic run."""

from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from explainkit.cli import main, resolve_data_path, validate_train_config


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def write_config(path: Path, data_dir: Path, **train_overrides) -> Path:
    train = {
        "epochs": 1, "batch_size": 8, "grad_accumulation_steps": 1,
        "classifier_lr": 1e-3, "generator_lr": 1e-3,
        "classifier_mode": "qa_evidence", "generator_optimizer": "adamw",
        "seed": 0,
    }
    train.update(train_overrides)
    config = {
        "data": {
            "train_path": str(data_dir / "train.jsonl"),
            "dev_path": str(data_dir / "dev.jsonl"),
            "task": "mcqa",
        },
        "model": {"d": 16, "num_layers": 1, "num_heads": 2, "ffn_size": 32, "K": 4},
        "train": train,
    }
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One shared prepare+train run reused by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main([
        "prepare", "--dataset", "synthetic", "--out-dir", str(data),
        "--n-train", "32", "--n-dev", "8", "--seed", "7",
    ]) == 0
    config = write_config(root / "config.json", data)
    assert main(["train", "--config", str(config), "--out-dir", str(root / "run")]) == 0
    return root


class TestPrepare:
    def test_synthetic_outputs(self, pipeline):
        data = pipeline / "data"
        assert len(read_jsonl(data / "train.jsonl")) == 32
        assert len(read_jsonl(data / "dev.jsonl")) == 8
        stats = json.loads((data / "stats.json").read_text())
        assert stats["train"]["count"] == 32
        assert stats["train"]["num_options"] == 4

    def test_manifest_written(self, pipeline):
        manifest = json.loads((pipeline / "data" / "manifest.json").read_text())
        assert manifest["command"] == "prepare"
        assert manifest["seed"] == 7
        assert manifest["finished_at"] is not None

    def test_same_seed_byte_identical(self, tmp_path):
        for tag in ("a", "b"):
            assert main([
                "prepare", "--dataset", "synthetic",
                "--out-dir", str(tmp_path / tag),
                "--n-train", "16", "--n-dev", "4", "--seed", "3",
            ]) == 0
        assert (tmp_path / "a" / "train.jsonl").read_bytes() == (
            tmp_path / "b" / "train.jsonl"
        ).read_bytes()

    def test_cme_round_trip(self, tmp_path, pipeline):
        src = pipeline / "data" / "dev.jsonl"
        assert main([
            "prepare", "--dataset", "cme", "--out-dir", str(tmp_path / "out"),
            str(src),
        ]) == 0
        assert len(read_jsonl(tmp_path / "out" / "train.jsonl")) == 8


class TestTrainValidation:
    def test_valid_config(self, pipeline):
        config = json.loads((pipeline / "config.json").read_text())
        assert validate_train_config(config) == []

    def test_all_problems_listed(self, tmp_path):
        problems = validate_train_config(
            {
                "data": {"train_path": str(tmp_path / "missing.jsonl")},
                "model": {"d": 10, "num_heads": 3},
                "train": {"bogus": 1},
                "extra": {},
            }
        )
        text = "\n".join(problems)
        assert "extra" in text
        assert "dev_path" in text
        assert "not found" in text
        assert "model config invalid" in text
        assert "train config invalid" in text

    def test_missing_config_flag_fails(self, capsys):
        assert main(["train", "--out-dir", "/tmp/x"]) == 2

    def test_invalid_config_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"data": {}, "model": {}, "train": {"bogus": 1}}))
        assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "bogus" in err and "train_path" in err


class TestTrain:
    def test_outputs(self, pipeline):
        run = pipeline / "run"
        assert (run / "best" / "classifier.pt").exists()
        assert (run / "metrics.jsonl").exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["command"] == "train"

    def test_zero_weights_zero_in_metrics(self, pipeline, tmp_path):
        config = write_config(
            tmp_path / "c.json", pipeline / "data",
            weights={"ce": 1.0, "mle": 0.0, "ce_g": 0.0, "dis": 0.0},
        )
        assert main(["train", "--config", str(config), "--out-dir", str(tmp_path / "r")]) == 0
        for event in read_jsonl(tmp_path / "r" / "metrics.jsonl"):
            if event["event"] == "step":
                assert event["mle"] == event["ce_g"] == event["dis"] == 0.0

    def test_determinism_across_runs(self, pipeline, tmp_path, capsys):
        config = pipeline / "config.json"
        results = []
        for tag in ("r1", "r2"):
            assert main([
                "train", "--config", str(config), "--out-dir", str(tmp_path / tag)
            ]) == 0
            results.append(json.loads(capsys.readouterr().out.splitlines()[-1]))
        assert results[0]["best_dev_accuracy"] == results[1]["best_dev_accuracy"]


class TestGenerate:
    def test_records_and_candidates(self, pipeline, tmp_path):
        assert main([
            "generate", "--checkpoint", str(pipeline / "run" / "best"),
            "--data", str(pipeline / "data" / "dev.jsonl"),
            "--out-dir", str(tmp_path / "gen"),
            "--beams", "2", "--max-len", "8", "--num-return", "2",
            "--classifier-mode", "qa_evidence",
        ]) == 0
        records = read_jsonl(tmp_path / "gen" / "explanations.jsonl")
        assert len(records) == 8
        for record in records:
            assert set(record) == {"id", "predicted_label", "explanation", "candidates"}
            assert 0 <= record["predicted_label"] < 4
            assert len(record["candidates"]) == 2

    def test_single_return_omits_candidates(self, pipeline, tmp_path):
        assert main([
            "generate", "--checkpoint", str(pipeline / "run" / "best"),
            "--data", str(pipeline / "data" / "dev.jsonl"),
            "--out-dir", str(tmp_path / "gen"),
            "--beams", "1", "--max-len", "4",
            "--classifier-mode", "qa_evidence",
        ]) == 0
        records = read_jsonl(tmp_path / "gen" / "explanations.jsonl")
        assert all("candidates" not in r for r in records)


class TestEval:
    def test_accuracy_from_checkpoint(self, pipeline, tmp_path, capsys):
        assert main([
            "eval", "--data", str(pipeline / "data" / "dev.jsonl"),
            "--checkpoint", str(pipeline / "run" / "best"),
            "--metrics", "accuracy", "--out-dir", str(tmp_path / "ev"),
            "--classifier-mode", "qa_evidence",
        ]) == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["bleu"] is None

    def test_bleu_perfect_candidates(self, pipeline, tmp_path):
        samples = read_jsonl(pipeline / "data" / "dev.jsonl")
        explanations = tmp_path / "expl.jsonl"
        with open(explanations, "w") as fh:
            for s in samples:
                fh.write(json.dumps({
                    "id": s["id"], "predicted_label": s["answer_index"],
                    "explanation": s["explanation"],
                }) + "\n")
        assert main([
            "eval", "--data", str(pipeline / "data" / "dev.jsonl"),
            "--explanations", str(explanations),
            "--metrics", "accuracy,bleu", "--out-dir", str(tmp_path / "ev"),
        ]) == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert report["accuracy"] == 1.0
        assert report["bleu"] == pytest.approx(100.0)

    def test_unknown_metric_rejected(self, pipeline, tmp_path):
        assert main([
            "eval", "--data", str(pipeline / "data" / "dev.jsonl"),
            "--metrics", "f1", "--out-dir", str(tmp_path / "ev"),
        ]) == 2

    def test_accuracy_ye_structural(self, pipeline, tmp_path):
        """3 probes produce 3 per-probe accuracies and their mean."""
        assert main([
            "eval", "--data", str(pipeline / "data" / "dev.jsonl"),
            "--probe-train", str(pipeline / "data" / "train.jsonl"),
            "--config", str(pipeline / "config.json"),
            "--metrics", "accuracy_ye", "--out-dir", str(tmp_path / "ev"),
            "--num-probes", "3",
        ]) == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert len(report["per_probe_accuracy"]) == 3
        assert report["accuracy_ye"] == pytest.approx(
            sum(report["per_probe_accuracy"]) / 3
        )


class TestDataDirEnv:
    def test_relative_paths_resolve_against_env(self, pipeline, monkeypatch):
        monkeypatch.setenv("EXPLAINKIT_DATA_DIR", str(pipeline / "data"))
        assert resolve_data_path("dev.jsonl") == pipeline / "data" / "dev.jsonl"

    def test_absolute_paths_untouched(self, pipeline, monkeypatch):
        monkeypatch.setenv("EXPLAINKIT_DATA_DIR", str(pipeline / "data"))
        absolute = str(pipeline / "config.json")
        assert str(resolve_data_path(absolute)) == absolute

    def test_missing_relative_falls_back(self, monkeypatch):
        monkeypatch.setenv("EXPLAINKIT_DATA_DIR", "/nonexistent")
        assert resolve_data_path("plain.txt") == Path("plain.txt")
