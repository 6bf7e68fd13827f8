import pytest

from pair_absa.config import (
    LOG_LEVEL_ENV,
    OUTPUT_DIR_ENV,
    ModelConfig,
    build_config,
    load_config_file,
    log_level_from_env,
    output_dir_from_env,
)
from pair_absa.errors import ConfigError, ParseError


def test_defaults_match_published_hyperparameters():
    config = ModelConfig()
    assert (config.hidden_dim, config.word_dim, config.char_embed_dim) == (200, 100, 30)
    assert (config.n_layers, config.n_heads, config.batch_size) == (3, 8, 24)
    assert config.learning_rate == 1e-3
    assert config.dropout == 0.5
    assert config.clip_norm == 5.0
    assert (config.decay_rate, config.decay_steps) == (0.05, 1000)
    assert config.directions == "quad"
    assert config.pair_out_dim == 200
    assert config.resolved_ffn_dim == 25


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        build_config(hidden_sizes=3)


def test_heads_must_divide_hidden_dim():
    with pytest.raises(ConfigError):
        build_config(hidden_dim=30, n_heads=8)


def test_no_pair_encoder_turns_interaction_off():
    assert build_config(use_pair_encoder=False).use_interaction is False


def test_file_values_are_overridden_by_keywords(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text("# toy\nhidden_dim = 64\n\nn_heads=4  # fewer heads\ntask = aesc\n", encoding="utf-8")
    assert load_config_file(path) == {"hidden_dim": "64", "n_heads": "4", "task": "aesc"}
    config = build_config(path, hidden_dim=32, seed=None)
    assert (config.hidden_dim, config.n_heads, config.task, config.seed) == (32, 4, "aesc", 0)


def test_malformed_config_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("hidden_dim 64\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_config_file(path)
    assert info.value.line == 1


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "out"))
    monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
    assert output_dir_from_env() == tmp_path / "out"
    assert log_level_from_env() == "DEBUG"
