"""Tests for selrobust.config layering, validation and hashing."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import pytest
import yaml

from selrobust.config import (
    SELROBUST_DEFAULTS,
    ExperimentConfig,
    config_template,
    deep_merge,
    list_overrides,
    load_experiment_config,
    load_selrobust_config,
)
from selrobust.errors import ConfigError


def _write(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


class TestDeepMerge:
    def test_nested_merge(self):
        merged = deep_merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"c": 5}})
        assert merged == {"a": {"b": 1, "c": 5}, "d": 3}

    def test_none_does_not_override(self):
        assert deep_merge({"a": 1}, {"a": None}) == {"a": 1}

    def test_base_not_mutated(self):
        base = {"a": {"b": [1]}}
        merged = deep_merge(base, {"a": {"b": [2]}})
        merged["a"]["b"].append(3)
        assert base == {"a": {"b": [1]}}


class TestLayering:
    def test_defaults_only(self, tmp_path):
        merged = load_selrobust_config(project_dir=tmp_path)
        assert merged == SELROBUST_DEFAULTS

    def test_precedence(self, tmp_path, monkeypatch):
        user_dir = tmp_path / "user"
        project_dir = tmp_path / "project"
        _write(user_dir / "config.yaml", {"workers": 2, "seeds": [9], "train": {"epochs": 3}})
        _write(project_dir / ".selrobust.yaml", {"workers": 3, "train": {"batch_size": 8}})
        explicit = _write(tmp_path / "explicit.yaml", {"workers": 4})
        merged = load_selrobust_config(
            project_dir=project_dir, user_dir=user_dir, config_file=explicit,
            cli_overrides={"alphas": [0.5], "workers": None},
        )
        assert merged["workers"] == 4
        assert merged["seeds"] == [9]
        assert merged["alphas"] == [0.5]
        assert merged["train"]["epochs"] == 3
        assert merged["train"]["batch_size"] == 8
        assert merged["train"]["learning_rate"] == SELROBUST_DEFAULTS["train"]["learning_rate"]

    def test_home_env_locates_user_config(self, tmp_path, monkeypatch):
        home = tmp_path / "home"
        _write(home / "config.yaml", {"workers": 6})
        monkeypatch.setenv("SELROBUST_HOME", str(home))
        assert load_selrobust_config(project_dir=tmp_path)["workers"] == 6

    def test_output_root_env_beats_files_not_flags(self, tmp_path, monkeypatch):
        explicit = _write(tmp_path / "explicit.yaml", {"output_dir": "from-file"})
        monkeypatch.setenv("SELROBUST_OUTPUT_ROOT", "from-env")
        assert load_selrobust_config(project_dir=tmp_path, config_file=explicit)["output_dir"] == "from-env"
        merged = load_selrobust_config(project_dir=tmp_path, config_file=explicit,
                                       cli_overrides={"output_dir": "from-flag"})
        assert merged["output_dir"] == "from-flag"

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_selrobust_config(project_dir=tmp_path, config_file=tmp_path / "absent.yaml")

    def test_invalid_yaml_is_ignored(self, tmp_path, caplog):
        (tmp_path / ".selrobust.yaml").write_text("alphas: [1, 2\n", encoding="utf-8")
        assert load_selrobust_config(project_dir=tmp_path) == SELROBUST_DEFAULTS
        assert "Invalid YAML" in caplog.text

    def test_non_mapping_yaml_is_ignored(self, tmp_path):
        (tmp_path / ".selrobust.yaml").write_text("- 1\n- 2\n", encoding="utf-8")
        assert load_selrobust_config(project_dir=tmp_path) == SELROBUST_DEFAULTS


class TestExperimentConfig:
    def test_from_defaults(self, tmp_path):
        config = load_experiment_config(project_dir=tmp_path)
        assert config.seeds == (0, 1, 2, 3, 4)
        assert 0.0 in config.alphas
        assert config.train.anneal_epochs == (12, 17)
        assert config.network_spec().n_classes == 8
        assert config.input_shape == (1, 16, 16)

    def test_tiny_mapping(self, tiny_config_mapping):
        config = ExperimentConfig.from_mapping(tiny_config_mapping)
        assert config.alphas == (-1.0, 0.0, 1.0)
        assert config.model.widths == (2, 3)
        assert config.corruption.kinds == ("gaussian_noise", "brightness")

    @pytest.mark.parametrize("mapping, path", [
        ({"alphas": []}, "alphas"),
        ({"seeds": [-1]}, "seeds.0"),
        ({"model": {"pool": "median"}}, "model.pool"),
        ({"train": {"epochs": 0}}, "train.epochs"),
        ({"unknown_key": 1}, "<root>"),
    ])
    def test_schema_violation(self, mapping, path):
        with pytest.raises(ConfigError, match=f"Schema violation at {path}"):
            ExperimentConfig.from_mapping(mapping)

    def test_to_dict_is_json_safe(self, tiny_config_mapping):
        data = ExperimentConfig.from_mapping(tiny_config_mapping).to_dict()
        assert data["model"]["widths"] == [2, 3]
        assert data["data"]["path"] is None


class TestConfigHash:
    def test_stable(self, tiny_config_mapping):
        a = ExperimentConfig.from_mapping(tiny_config_mapping)
        b = ExperimentConfig.from_mapping(dict(tiny_config_mapping))
        assert a.config_hash(0.5, 1) == b.config_hash(0.5, 1)
        assert len(a.config_hash(0.5, 1)) == 64

    def test_sensitive_to_training_fields(self, tiny_config_mapping):
        config = ExperimentConfig.from_mapping(tiny_config_mapping)
        base = config.config_hash(0.0, 0)
        assert config.config_hash(0.1, 0) != base
        assert config.config_hash(0.0, 1) != base
        assert config.config_hash(0.0, 0, pgd_train_steps=2) != base
        for section, change in [("train", {"learning_rate": 0.2}), ("model", {"kernel": 5}),
                                ("data", {"seed": 8})]:
            changed = dataclasses.replace(config, **{section: dataclasses.replace(getattr(config, section), **change)})
            assert changed.config_hash(0.0, 0) != base

    def test_ignores_evaluation_fields(self, tiny_config_mapping):
        config = ExperimentConfig.from_mapping(tiny_config_mapping)
        changed = dataclasses.replace(
            config,
            output_dir="elsewhere",
            workers=4,
            train=dataclasses.replace(config.train, keep_all_checkpoints=True),
            attack=dataclasses.replace(config.attack, pgd_steps=(3,)),
        )
        assert changed.config_hash(0.0, 0) == config.config_hash(0.0, 0)


class TestTemplates:
    def test_desk_preset_is_defaults(self):
        assert config_template("desk") == SELROBUST_DEFAULTS

    def test_extended_preset(self):
        template = config_template("extended")
        assert template["attack"]["step_size"] == 0.0001
        assert template["train"]["pgd_train_steps"] == [0, 4, 8]
        ExperimentConfig.from_mapping(template)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            config_template("huge")


class TestListOverrides:
    def test_comma_separated_and_repeated(self):
        assert list_overrides(["-1,0", "0.5"]) == [-1.0, 0.0, 0.5]

    def test_empty_passes_through(self):
        assert list_overrides(None) is None
        assert list_overrides([]) is None

    def test_not_a_number(self):
        with pytest.raises(ConfigError, match="not a number"):
            list_overrides(["1,x"])


class TestDocumentedExamples:
    @pytest.mark.parametrize("name", ["selrobust.minimal.yaml", "selrobust.full.yaml"])
    def test_example_validates(self, name):
        path = Path(__file__).resolve().parents[2] / "docs" / "examples" / name
        config = ExperimentConfig.from_mapping(yaml.safe_load(path.read_text(encoding="utf-8")))
        assert config.alphas

    def test_full_example_matches_defaults(self):
        path = Path(__file__).resolve().parents[2] / "docs" / "examples" / "selrobust.full.yaml"
        full = ExperimentConfig.from_mapping(yaml.safe_load(path.read_text(encoding="utf-8")))
        assert full == ExperimentConfig.from_mapping({})
