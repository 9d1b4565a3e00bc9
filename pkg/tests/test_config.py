"""Tests for configuration management."""
import json
import os

import pytest

from rpca.config import Config
from rpca.errors import ConfigurationError
from rpca.experiment import load_experiment_config


def test_config_defaults(tmp_path, monkeypatch):
    """Test that default configuration values are set correctly."""
    monkeypatch.chdir(tmp_path)
    for name in ("RPCA_WEIGHTS_DIR", "RPCA_DEVICE", "RPCA_HOST", "RPCA_PORT", "RPCA_BEARER_TOKEN"):
        monkeypatch.delenv(name, raising=False)
    config = Config()
    assert config.weights_dir == "./weights"
    assert config.device == "auto"
    assert config.host == "0.0.0.0"
    assert config.port == 8000
    assert config.bearer_token == "mysecrettoken"
    assert config.checkpoint is None


def test_config_from_file(tmp_path, monkeypatch):
    """Test loading configuration from a JSON file."""
    config_data = {
        "host": "127.0.0.1",
        "port": 9000,
        "weights_dir": "/data/weights",
        "bearer_token": "test-token-123",
    }
    with open(tmp_path / "rpca_config.json", "w") as f:
        json.dump(config_data, f)

    monkeypatch.chdir(tmp_path)
    for name in ("RPCA_WEIGHTS_DIR", "RPCA_HOST", "RPCA_PORT", "RPCA_BEARER_TOKEN"):
        monkeypatch.delenv(name, raising=False)
    config = Config()

    assert config.host == "127.0.0.1"
    assert config.port == 9000
    assert config.weights_dir == "/data/weights"
    assert config.bearer_token == "test-token-123"


def test_config_broken_file_is_ignored(tmp_path, monkeypatch):
    (tmp_path / "rpca_config.json").write_text("{not json")
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("RPCA_PORT", raising=False)
    assert Config().port == 8000


def test_config_env_override(tmp_path, monkeypatch):
    """Test that environment variables override config file."""
    (tmp_path / "rpca_config.json").write_text(json.dumps({"port": 9000}))
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("RPCA_HOST", "192.168.1.1")
    monkeypatch.setenv("RPCA_PORT", "5000")
    monkeypatch.setenv("RPCA_WEIGHTS_DIR", "/env/weights")
    monkeypatch.setenv("RPCA_DEVICE", "cpu")

    config = Config()

    assert config.host == "192.168.1.1"
    assert config.port == 5000
    assert config.weights_dir == "/env/weights"
    assert config.resolve_device() == "cpu"


def test_config_save_template(tmp_path):
    """Test saving a configuration template."""
    template_path = tmp_path / "test_config.json"
    Config().save_template(str(template_path))

    with open(template_path) as f:
        data = json.load(f)

    for key in ("weights_dir", "device", "host", "port", "bearer_token", "checkpoint", "_comment"):
        assert key in data


def test_experiment_config_yaml_with_overrides(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "variant:\n  kind: regions_only\n  backbone: mobilenetv2\n"
        "train:\n  epochs: 3\n  lr: 0.01\n  augment:\n    rotation_deg: 10\n"
        "split:\n  mode: count-table\n  table: womensports\n"
    )
    cfg = load_experiment_config(path, ["train.lr=0.5", "train.seed=4"])
    assert cfg.variant.kind == "regions_only"
    assert cfg.variant.backbone == "mobilenetv2"
    assert cfg.train.epochs == 3
    assert cfg.train.lr == 0.5
    assert cfg.train.seed == 4
    assert cfg.train.augment.rotation_deg == 10
    assert cfg.split.mode == "count_table"
    # resolved config survives a JSON round trip
    again = load_experiment_config(None, None)
    assert again.train.lr == 0.001
    resolved = tmp_path / "resolved.json"
    resolved.write_text(cfg.to_json())
    assert load_experiment_config(resolved).to_dict() == cfg.to_dict()


def test_experiment_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"train": {"epochs": 2, "learning_rate": 0.1}}))
    with pytest.raises(ConfigurationError):
        load_experiment_config(path)
    with pytest.raises(ConfigurationError):
        load_experiment_config(None, {"bogus": 1})
    with pytest.raises(ConfigurationError):
        load_experiment_config(None, {"variant.head.width": 3})


def test_regions_on_baseline_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        load_experiment_config(None, {"variant.kind": "baseline", "variant.regions": [[0, 16, 0, 32]]})


def test_shipped_recipe_encodes_full_protocol():
    recipe = os.path.join(os.path.dirname(__file__), "..", "configs", "womensports_full.yaml")
    cfg = load_experiment_config(recipe, {"train.seed": 1})
    assert cfg.train.epochs == 100
    assert cfg.train.lr == pytest.approx(0.001)
    assert cfg.train.augment.source_side == 256
    assert cfg.train.augment.crop_side == 224
    assert cfg.train.augment.rotation_deg == 25
    assert tuple(cfg.train.augment.zoom_range) == (0.75, 1.25)
    assert cfg.variant.kind == "full"
    assert cfg.variant.augment_regime == "extended"
