from __future__ import annotations

import pytest

from app.config import (
    RunConfig,
    build_run_config,
    dump_run_config,
    get_settings,
    load_run_config,
    parse_key_value_text,
    read_snapshot,
)
from app.errors import ConfigError


def test_settings_read_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("TCTRANS_DEBUG_NUMERICS", "yes")
    monkeypatch.setenv("TCTRANS_WORKERS", " 3 ")
    monkeypatch.setenv("TCTRANS_LOG_LEVEL", "debug")
    settings = get_settings()
    assert settings.debug_numerics is True
    assert settings.workers == 3
    assert settings.log_level == "DEBUG"
    assert settings.audit_log_path == str(tmp_path / "audit.jsonl")


def test_parse_key_value_text():
    text = "# comment\nseed = 3\n\narm=C  # trailing\nsize=32x32\n"
    assert parse_key_value_text(text) == {"seed": "3", "arm": "C", "size": "32x32"}
    with pytest.raises(ConfigError):
        parse_key_value_text("no equals sign")
    with pytest.raises(ConfigError):
        parse_key_value_text("=5")


def test_flags_override_file_values():
    config = build_run_config({"seed": "1", "omega": "0.5"}, {"seed": "9"})
    assert config.seed == 9
    assert config.omega == 0.5


def test_empty_value_resets_to_default():
    assert build_run_config({"steps": "40"}, {"steps": ""}).steps is None


def test_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        build_run_config({"no_such_key": "1"}, {})
    with pytest.raises(ConfigError):
        build_run_config({}, {"size": "64"})
    with pytest.raises(ConfigError):
        build_run_config({}, {"arm": "E"})
    with pytest.raises(ConfigError):
        build_run_config({}, {"count": "-1"})
    with pytest.raises(ConfigError):
        build_run_config({}, {"split": "holdout"})


def test_size_is_normalized():
    config = build_run_config({}, {"size": "32 X 48"})
    assert config.size == "32x48"
    assert config.size_hw == (32, 48)


def test_snapshot_round_trip(tmp_path):
    config = build_run_config({}, {"arm": "B", "steps": "7", "normalize_triplet": "true", "size": "32x32"})
    (tmp_path / "resolved_config.txt").write_text(dump_run_config(config), encoding="utf-8")
    assert read_snapshot(str(tmp_path)) == config
    assert read_snapshot(str(tmp_path / "missing")) is None


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.conf", {})


def test_derived_configs_follow_the_arm():
    config = RunConfig(arm="A", n_oar=3, size="32x32", steps=5)
    model = config.to_model_config()
    assert model.use_transformer is False
    assert model.in_channels == 5
    assert model.input_size == (32, 32)
    train = config.to_train_config()
    assert train.ablation_arm == "A"
    assert train.max_steps == 5
    assert not train.uses_triplet
    assert config.to_phantom_spec().n_oar == 3
