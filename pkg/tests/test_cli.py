"""
Tests for the command-line interface
"""
import json
import logging

import pandas as pd
import pytest
from click.testing import CliRunner

from app import cli, error_line, run
from backend.errors import ConfigError
from config.settings import CONFIG_DIR

TINY_CONFIG = str(CONFIG_DIR / "tiny_config.json")


@pytest.fixture(autouse=True)
def restore_logging():
    """The CLI reconfigures the root logger; put it back afterwards"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """gen + train with the shipped tiny config"""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    gen = runner.invoke(cli, ["-q", "gen", "--config", TINY_CONFIG, "--out", str(root / "data")])
    assert gen.exit_code == 0, gen.output
    manifest = root / "data" / "manifest.jsonl"
    trained = runner.invoke(
        cli, ["-q", "train", "--config", TINY_CONFIG, "--manifest", str(manifest), "--out", str(root / "train")]
    )
    assert trained.exit_code == 0, trained.output
    return root, manifest


class TestCommands:
    """Help, usage and error reporting"""

    @pytest.mark.parametrize("command", ["gen", "train", "eval", "ablate", "report", "selftest"])
    def test_help(self, runner, command):
        result = runner.invoke(cli, [command, "--help"])
        assert result.exit_code == 0
        assert "Usage" in result.output

    def test_unknown_command(self, runner):
        result = runner.invoke(cli, ["frobnicate"])
        assert result.exit_code == 2

    def test_invalid_config(self, runner, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train": {"rho": 0.5}}))
        result = runner.invoke(cli, ["-q", "gen", "--config", str(config), "--out", str(tmp_path / "data")])
        assert result.exit_code == 1
        lines = result.stderr.strip().splitlines()
        assert lines[-1].startswith("error type=ConfigError field=train.rho message=")
        assert not (tmp_path / "data" / "manifest.jsonl").exists()

    def test_unsafe_ranges_accepts(self, runner, tmp_path):
        config = tmp_path / "wide.json"
        config.write_text(json.dumps({"dataset": {"n_images": 1, "width": 32, "height": 32, "mean_objects": 2},
                                      "train": {"delta": 150.0}}))
        result = runner.invoke(cli, ["-q", "gen", "--config", str(config), "--unsafe-ranges",
                                     "--out", str(tmp_path / "data")])
        assert result.exit_code == 0, result.output

    def test_missing_manifest(self, runner, tmp_path):
        result = runner.invoke(cli, ["-q", "train", "--manifest", str(tmp_path / "none.jsonl"),
                                     "--out", str(tmp_path)])
        assert result.exit_code == 1
        assert "error type=DatasetIOError" in result.stderr

    def test_bad_k(self, runner, tmp_path):
        result = runner.invoke(cli, ["ablate", "--k", "1", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_error_line_is_single_line(self):
        line = error_line(ConfigError("bad\nvalue", field="eval.k"))
        assert line == "error type=ConfigError field=eval.k message=bad value"

    def test_run_returns_exit_codes(self, tmp_path, capsys):
        assert run(["selftest", "--help"]) == 0
        assert run(["frobnicate"]) == 2
        assert run(["-q", "train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 1
        assert "error type=DatasetIOError" in capsys.readouterr().err

    def test_output_path_is_a_file(self, runner, tmp_path):
        blocker = tmp_path / "taken"
        blocker.write_text("")
        metrics = tmp_path / "m.csv"
        metrics.write_text("config,fold,map,precision,recall,f1,fingerprint,error\n")
        result = runner.invoke(cli, ["-q", "report", "--metrics", str(metrics), "--out", str(blocker / "sub")])
        assert result.exit_code == 1
        assert result.stderr.strip().splitlines()[-1].startswith("error type=DatasetIOError")

    def test_selftest(self, runner):
        result = runner.invoke(cli, ["selftest", "--instances", "2", "--trials", "50"])
        assert result.exit_code == 0, result.output
        assert all(line.startswith("PASS ") for line in result.stdout.splitlines())


class TestPipeline:
    """gen -> train -> eval -> ablate -> report on the tiny config"""

    def test_gen_is_reproducible(self, runner, tiny_run, tmp_path):
        _, manifest = tiny_run
        again = runner.invoke(cli, ["-q", "gen", "--config", TINY_CONFIG, "--out", str(tmp_path)])
        assert again.exit_code == 0
        assert (tmp_path / "manifest.jsonl").read_bytes() == manifest.read_bytes()
        assert len(manifest.read_text().splitlines()) == 8

    def test_train_outputs(self, tiny_run):
        root, _ = tiny_run
        assert (root / "train" / "snapshot.json").exists()
        assert len((root / "train" / "train_log.jsonl").read_text().splitlines()) == 2

    def test_eval(self, runner, tiny_run, tmp_path):
        root, manifest = tiny_run
        result = runner.invoke(cli, ["-q", "eval", "--snapshot", str(root / "train" / "snapshot.json"),
                                     "--manifest", str(manifest), "--config", TINY_CONFIG,
                                     "--render", "2", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "mAP" in result.stdout
        metrics = pd.read_csv(tmp_path / "metrics.csv", dtype=str, keep_default_na=False)
        assert list(metrics["fold"]) == ["0", "mean±std"]
        curve = pd.read_csv(tmp_path / "pr_curve.csv")
        assert list(curve.columns) == ["series", "rank", "confidence", "precision", "recall"]
        assert len(list((tmp_path / "renders").glob("*.png"))) == 2

    def test_ablate_and_report(self, runner, tiny_run, tmp_path):
        root, manifest = tiny_run
        ablate = runner.invoke(cli, ["-q", "ablate", "--config", TINY_CONFIG, "--manifest", str(manifest),
                                     "--k", "2", "--rows", "baseline", "--rows", "all",
                                     "--out", str(tmp_path / "ablate")])
        assert ablate.exit_code == 0, ablate.output
        frame = pd.read_csv(tmp_path / "ablate" / "ablation.csv", dtype=str, keep_default_na=False)
        assert list(frame["config"].unique()) == ["Baseline", "+All"]
        assert (frame["fold"] == "mean±std").sum() == 2
        assert "+All" in (tmp_path / "ablate" / "ablation.txt").read_text()

        evaluated = tmp_path / "eval"
        runner.invoke(cli, ["-q", "eval", "--snapshot", str(root / "train" / "snapshot.json"),
                            "--manifest", str(manifest), "--out", str(evaluated)])
        report = runner.invoke(cli, ["-q", "report", "--metrics", str(tmp_path / "ablate" / "ablation.csv"),
                                     "--pr-curve", str(evaluated / "pr_curve.csv"),
                                     "--out", str(tmp_path / "report")])
        assert report.exit_code == 0, report.output
        for name in ("bars_map.svg", "bars_f1.svg", "pr_curves.svg", "summary.txt"):
            assert (tmp_path / "report" / name).exists()

    def test_report_without_aggregates(self, runner, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("config,fold,map,precision,recall,f1,fingerprint,error\n")
        result = runner.invoke(cli, ["-q", "report", "--metrics", str(path), "--out", str(tmp_path / "r")])
        assert result.exit_code == 1
        assert "field=metrics" in result.stderr

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverging_training_reports_one_line(self, runner, tiny_run, tmp_path):
        _, manifest = tiny_run
        config = tmp_path / "overflow.json"
        config.write_text(json.dumps({"train": {"epochs": 2, "batch_size": 1, "embedding_dim": 4,
                                                "learning_rate": 1e200, "max_grad_norm": None}}))
        result = runner.invoke(cli, ["-q", "train", "--config", str(config), "--manifest", str(manifest),
                                     "--out", str(tmp_path / "train")])
        assert result.exit_code == 1
        lines = result.stderr.strip().splitlines()
        assert lines[-1].startswith("error type=TrainingError field=- message=Non-finite")

    def test_ablate_over_seeds(self, runner, tiny_run, tmp_path):
        _, manifest = tiny_run
        result = runner.invoke(cli, ["-q", "ablate", "--config", TINY_CONFIG, "--manifest", str(manifest),
                                     "--k", "2", "--rows", "baseline", "--seeds", "2", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(tmp_path / "ablation.csv", dtype=str, keep_default_na=False)
        folds = frame[frame["fold"] != "mean±std"]
        assert sorted(folds["seed"].unique()) == ["7", "8"]
        assert len(folds) == 4
        assert list(frame.loc[frame["fold"] == "mean±std", "seed"]) == [""]
        assert "directional:" in (tmp_path / "ablation.txt").read_text()
        assert "directional:" in result.stdout
