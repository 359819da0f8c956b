import json

import pytest

from tbigan.cli import main
from tbigan.config import ExperimentConfig, assemble_experiment, load_kv_file, parse_kv_text
from tbigan.errors import UsageError


def assemble(**options):
    return assemble_experiment(options)


class TestExperimentConfig:
    def test_defaults(self):
        exp = assemble(dataset="synthetic")
        assert exp.model_tag == "triplet-bigan"
        assert exp.arch.image_shape == (1, 16, 16)
        assert exp.train.latent_dim == exp.arch.latent_dim

    def test_kv_roundtrip(self):
        exp = assemble(
            dataset="synthetic",
            model="triplet-bigan",
            **{"train.latent_dim": 16, "train.n_per_class": 50, "train.lambda": 2.0, "train.seed": 3},
        )
        text = exp.to_kv_text()
        rebuilt = assemble_experiment(parse_kv_text(text))
        assert rebuilt == exp
        assert rebuilt.to_kv_text() == text

    def test_bigan_pins_lambda(self):
        exp = assemble(dataset="synthetic", model="bigan")
        assert exp.train.lambda_triplet == 0.0
        with pytest.raises(UsageError):
            assemble(dataset="synthetic", model="bigan", **{"train.lambda": 0.5})
        # explicitly asking for zero is consistent, not a conflict
        assemble(dataset="synthetic", model="bigan", **{"train.lambda": 0.0})

    def test_triplet_rejects_adversarial_knobs(self):
        exp = assemble(dataset="synthetic", model="triplet")
        assert exp.train.warmup_epochs == 0
        with pytest.raises(UsageError):
            assemble(dataset="synthetic", model="triplet", **{"train.lambda": 1.0})
        with pytest.raises(UsageError):
            assemble(dataset="synthetic", model="triplet", **{"train.warmup_epochs": 3})

    def test_unknown_keys_rejected(self):
        with pytest.raises(UsageError):
            parse_kv_text("train.momentum = 0.9")
        with pytest.raises(UsageError):
            parse_kv_text("no equals sign here")

    def test_benchmark_shape(self):
        exp = assemble(dataset="cifar10", **{"train.latent_dim": 64})
        assert exp.arch.image_shape == (3, 32, 32)
        assert exp.arch.encoder_channels[0] == 32


TRAIN_ARGS = [
    "train",
    "--dataset", "synthetic",
    "--model", "triplet-bigan",
    "--m", "16",
    "--n-per-class", "50",
    "--epochs", "1",
    "--warmup-epochs", "0",
    "--batch-size", "64",
    "--seed", "0",
]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(TRAIN_ARGS + ["--out", str(out)]) == 0
    return out


class TestTrainCommand:
    def test_outputs_exist(self, trained_run):
        assert (trained_run / "resolved_config.txt").is_file()
        assert (trained_run / "metrics.jsonl").is_file()
        assert (trained_run / "checkpoints" / "epoch_0001.pt").is_file()
        assert not (trained_run / ".lock").exists()

    def test_resolved_config_rebuilds_same_experiment(self, trained_run):
        values = load_kv_file(trained_run / "resolved_config.txt")
        exp = assemble_experiment(values)
        assert exp.train.latent_dim == 16
        assert exp.train.n_per_class == 50

    def test_same_seed_reproduces_metrics_bytes(self, trained_run, tmp_path):
        rerun = tmp_path / "rerun"
        assert main(TRAIN_ARGS + ["--out", str(rerun)]) == 0
        assert (rerun / "metrics.jsonl").read_bytes() == (trained_run / "metrics.jsonl").read_bytes()

    def test_lambda_conflicts_with_bigan(self, tmp_path, capsys):
        code = main(["train", "--dataset", "synthetic", "--model", "bigan", "--lambda", "0.5", "--out", str(tmp_path / "x")])
        assert code == 2
        assert "lambda" in capsys.readouterr().err

    def test_locked_directory_rejected(self, tmp_path):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").write_text("12345\n")
        assert main(TRAIN_ARGS + ["--out", str(out)]) == 2

    def test_missing_benchmark_archive_is_data_error(self, tmp_path):
        code = main(["train", "--dataset", "cifar10", "--data-root", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_resolved_config_reruns_identically(self, trained_run, tmp_path):
        out = tmp_path / "fromfile"
        code = main([
            "train",
            "--config", str(trained_run / "resolved_config.txt"),
            "--out", str(out),
        ])
        assert code == 0
        assert (out / "metrics.jsonl").read_bytes() == (trained_run / "metrics.jsonl").read_bytes()

    def test_resume_with_conflicting_flag(self, trained_run, tmp_path):
        ckpt = trained_run / "checkpoints" / "epoch_0001.pt"
        code = main(["train", "--resume", str(ckpt), "--m", "32", "--out", str(tmp_path / "c")])
        assert code == 2


class TestEvalCommand:
    def test_eval_writes_reports(self, trained_run, tmp_path):
        ckpt = trained_run / "checkpoints" / "epoch_0001.pt"
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["accuracy"] <= 1.0
        assert 0.0 <= report["map"] <= 1.0
        assert report["k"] == 9
        assert report["m"] == 16
        assert report["n_per_class"] == 50
        text = (out / "report.txt").read_text()
        assert "m=16" in text

    def test_eval_is_deterministic(self, trained_run, tmp_path):
        ckpt = trained_run / "checkpoints" / "epoch_0001.pt"
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(out_a)]) == 0
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(out_b)]) == 0
        assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.pt")]) == 3


class TestEmbedCommand:
    def test_embed_labeled_train(self, trained_run, tmp_path):
        ckpt = trained_run / "checkpoints" / "epoch_0001.pt"
        out_file = tmp_path / "emb.tsv"
        assert main(["embed", "--checkpoint", str(ckpt), "--split", "train-labeled", "--out-file", str(out_file)]) == 0
        lines = out_file.read_text().splitlines()
        assert len(lines) == 151  # header + 3 classes x 50 labeled
        assert lines[0] == "# dim=16 count=150"


class TestGridCommand:
    def test_grid_written(self, trained_run, tmp_path):
        ckpt = trained_run / "checkpoints" / "epoch_0001.pt"
        out_file = tmp_path / "grid.png"
        assert main(["retrieve-grid", "--checkpoint", str(ckpt), "--num-queries", "5", "--top", "5", "--out-file", str(out_file)]) == 0
        from PIL import Image

        with Image.open(out_file) as image:
            width, height = image.size
        assert height == 5 * 16 + 6 * 2
        assert width == 6 * 16 + 7 * 2


class TestSweepCommand:
    def test_grid_cells_and_skip(self, tmp_path):
        out = tmp_path / "sweep"
        # pre-complete one cell with a sentinel report: it must be skipped
        cell = out / "bigan_m8_n20"
        cell.mkdir(parents=True)
        sentinel = {
            "accuracy": 0.123,
            "map": 0.25,
            "per_class_ap": [0.25, 0.25, 0.25],
            "per_class_queries": [1, 1, 2],
            "k": 9,
            "m": 8,
            "n_per_class": 20,
            "model_tag": "bigan",
            "dataset": "synthetic",
        }
        (cell / "report.json").write_text(json.dumps(sentinel))
        code = main([
            "sweep",
            "--dataset", "synthetic",
            "--models", "bigan,triplet",
            "--m-values", "8",
            "--n-values", "20",
            "--epochs", "1",
            "--warmup-epochs", "0",
            "--batch-size", "64",
            "--seed", "0",
            "--out", str(out),
        ])
        assert code == 0
        reports = json.loads((out / "sweep_reports.json").read_text())
        assert len(reports) == 2
        by_model = {r["model_tag"]: r for r in reports}
        assert by_model["bigan"]["accuracy"] == 0.123  # sentinel survived: cell skipped
        assert (out / "triplet_m8_n20" / "report.json").is_file()
        tables = (out / "sweep_tables.txt").read_text()
        assert "bigan" in tables and "triplet" in tables and "m=8" in tables

    def test_report_command_aggregates(self, tmp_path, capsys):
        out = tmp_path / "runs"
        cell = out / "cell"
        cell.mkdir(parents=True)
        report = {
            "accuracy": 0.5,
            "map": 0.5,
            "per_class_ap": [0.5],
            "per_class_queries": [2],
            "k": 9,
            "m": 16,
            "n_per_class": 10,
            "model_tag": "triplet",
            "dataset": "synthetic",
        }
        (cell / "report.json").write_text(json.dumps(report))
        assert main(["report", "--root", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "m=16" in printed and "n=10" in printed

    def test_report_without_reports_is_usage_error(self, tmp_path):
        assert main(["report", "--root", str(tmp_path)]) == 2


def test_unknown_dataset_flag_rejected_by_parser():
    assert main(["train", "--dataset", "mnist"]) == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    from tbigan import cli
    from tbigan.errors import NumericalError

    def explode(*args, **kwargs):
        raise NumericalError("l_d is not finite (nan) at step 3")

    monkeypatch.setattr(cli.trainer, "fit", explode)
    assert main(TRAIN_ARGS + ["--out", str(tmp_path / "boom")]) == 4
