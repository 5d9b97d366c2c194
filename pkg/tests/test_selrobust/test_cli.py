"""Tests for selrobust.cli using Click's CliRunner."""

from __future__ import annotations

import json

import pytest
import yaml
from click.testing import CliRunner

from selrobust import __version__
from selrobust.cli import cli
from selrobust.persistence import read_csv
from selrobust.sweep import STATUS_NAME


@pytest.fixture
def config_path(tmp_path, tiny_config_mapping):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_config_mapping), encoding="utf-8")
    return path


@pytest.fixture
def trained_run(tmp_path, config_path):
    """A generated dataset plus one trained run, both through the CLI."""
    runner = CliRunner()
    data_dir = tmp_path / "data"
    result = runner.invoke(cli, ["--config", str(config_path), "gen-data", "--out", str(data_dir)])
    assert result.exit_code == 0, result.output
    run_dir = tmp_path / "run"
    result = runner.invoke(cli, [
        "--config", str(config_path), "train", "--alpha", "0.5", "--seed", "0",
        "--data", str(data_dir), "--out", str(run_dir),
    ])
    assert result.exit_code == 0, result.output
    record = json.loads((run_dir / "run-record.json").read_text())
    return data_dir, record["best_checkpoint"]


class TestCLIRoot:
    def test_help(self):
        runner = CliRunner()
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for cmd in ("gen-data", "train", "attack", "corrupt", "analyze", "sweep", "report", "status", "init"):
            assert cmd in result.output, f"Command '{cmd}' not found in help output"

    def test_version(self):
        result = CliRunner().invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_missing_config_file(self, tmp_path):
        result = CliRunner().invoke(cli, ["--config", str(tmp_path / "absent.yaml"), "status", "--sweep-dir", "x"])
        assert result.exit_code == 1
        assert "not found" in result.output


class TestInitCommand:
    def test_writes_template(self, tmp_path):
        target = tmp_path / "cfg.yaml"
        result = CliRunner().invoke(cli, ["init", "--output", str(target)])
        assert result.exit_code == 0
        data = yaml.safe_load(target.read_text())
        assert data["seeds"] == [0, 1, 2, 3, 4]
        assert "verbose" not in data

    def test_refuses_overwrite(self, tmp_path):
        target = tmp_path / "cfg.yaml"
        target.write_text("alphas: [0]\n")
        result = CliRunner().invoke(cli, ["init", "--output", str(target)])
        assert result.exit_code == 1
        assert "already exists" in result.output
        assert target.read_text() == "alphas: [0]\n"

    def test_force_and_preset(self, tmp_path):
        target = tmp_path / "cfg.yaml"
        target.write_text("alphas: [0]\n")
        result = CliRunner().invoke(cli, ["init", "--output", str(target), "--force", "--preset", "extended"])
        assert result.exit_code == 0
        assert yaml.safe_load(target.read_text())["attack"]["step_size"] == 0.0001


class TestStageCommands:
    def test_gen_data(self, tmp_path):
        out = tmp_path / "data"
        result = CliRunner().invoke(cli, [
            "gen-data", "--out", str(out), "--classes", "3", "--train-per-class", "2",
            "--val-per-class", "1", "--test-per-class", "1", "--image-size", "8",
        ])
        assert result.exit_code == 0, result.output
        manifest = yaml.safe_load((out / "dataset.yaml").read_text())
        assert manifest["splits"]["train"]["count"] == 6
        assert manifest["generator"]["n_classes"] == 3

    def test_gen_data_invalid(self, tmp_path):
        result = CliRunner().invoke(cli, ["gen-data", "--out", str(tmp_path / "d"), "--classes", "1"])
        assert result.exit_code == 1
        assert "failed" in result.output

    def test_train_invalid_override(self, tmp_path, config_path):
        result = CliRunner().invoke(cli, [
            "--config", str(config_path), "train", "--alpha", "0", "--seed", "0",
            "--epochs", "0", "--out", str(tmp_path / "run"),
        ])
        assert result.exit_code == 1

    def test_attack(self, tmp_path, trained_run):
        data_dir, checkpoint = trained_run
        out = tmp_path / "attack.json"
        result = CliRunner().invoke(cli, [
            "attack", "--checkpoint", checkpoint, "--data", str(data_dir),
            "--kind", "pgd", "--epsilon", "0.05", "--steps", "2", "--out", str(out),
            "--dump", str(tmp_path / "adv"),
        ])
        assert result.exit_code == 0, result.output
        summary = json.loads(out.read_text())
        assert summary["kind"] == "attack"
        assert summary["max_abs_perturbation"] <= 0.05 + 1e-12
        assert (tmp_path / "adv" / "adversarial.stns").is_file()

    def test_corrupt(self, tmp_path, config_path, trained_run):
        data_dir, checkpoint = trained_run
        out = tmp_path / "suite.csv"
        result = CliRunner().invoke(cli, [
            "--config", str(config_path), "corrupt", "--checkpoint", checkpoint,
            "--data", str(data_dir), "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        rows = read_csv(out)
        assert len(rows) == 2 * 5
        assert json.loads(out.with_suffix(".json").read_text())["split"] == "test"

    @pytest.mark.parametrize("what", ["selectivity", "gradients", "jacobian", "dimensionality"])
    def test_analyze(self, tmp_path, config_path, trained_run, what):
        data_dir, checkpoint = trained_run
        result = CliRunner().invoke(cli, [
            "--config", str(config_path), "analyze", "--checkpoint", checkpoint,
            "--data", str(data_dir), "--what", what, "--out", str(tmp_path / "tables"),
        ])
        assert result.exit_code == 0, result.output
        assert any((tmp_path / "tables").glob("*.csv"))

    def test_attack_bad_checkpoint(self, tmp_path, trained_run):
        data_dir, _ = trained_run
        result = CliRunner().invoke(cli, [
            "attack", "--checkpoint", str(tmp_path), "--data", str(data_dir), "--epsilon", "0.1",
        ])
        assert result.exit_code == 1


class TestPipelineCommands:
    def test_status_without_sweep(self, tmp_path):
        result = CliRunner().invoke(cli, ["status", "--sweep-dir", str(tmp_path)])
        assert result.exit_code == 1
        assert STATUS_NAME in result.output

    def test_report_missing_dir(self, tmp_path):
        result = CliRunner().invoke(cli, ["report", "--sweep-dir", str(tmp_path / "absent")])
        assert result.exit_code != 0

    def test_report_without_measurements(self, tmp_path):
        result = CliRunner().invoke(cli, ["report", "--sweep-dir", str(tmp_path)])
        assert result.exit_code == 1

    def test_bad_alpha_list(self, config_path):
        result = CliRunner().invoke(cli, ["--config", str(config_path), "sweep", "--alphas", "0,abc"])
        assert result.exit_code == 1
        assert "not a number" in result.output

    def test_sweep_status_report(self, tmp_path, config_path):
        runner = CliRunner()
        sweep_dir = tmp_path / "cli-sweep"
        result = runner.invoke(cli, [
            "--config", str(config_path), "sweep", "--alphas", "0,1", "--seeds", "0",
            "--output-dir", str(sweep_dir),
        ])
        assert result.exit_code == 0, result.output
        assert "Alpha Sweep" in result.output

        result = runner.invoke(cli, ["status", "--sweep-dir", str(sweep_dir)])
        assert result.exit_code == 0
        assert "done" in result.output
        assert "completed: 2" in result.output

        result = runner.invoke(cli, [
            "--config", str(config_path), "report", "--sweep-dir", str(sweep_dir),
            "--out", str(tmp_path / "again"), "--format", "json",
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "again" / "summary.json").is_file()
        assert (tmp_path / "again" / "selectivity.json").is_file()
