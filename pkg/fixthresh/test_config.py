from __future__ import annotations

import json
from pathlib import Path

import pytest

from fixthresh.config import (
    DEFAULT_CONFIG_PATH,
    apply_overrides,
    default_config,
    load_config,
    parse_config,
    read_json_file,
    validate_raw_config,
)
from fixthresh.detector import BranchMode
from fixthresh.errors import ConfigError

CONFIG_DIR = DEFAULT_CONFIG_PATH.parent


def test_load_shipped_config() -> None:
    config = load_config(DEFAULT_CONFIG_PATH)
    assert config.seeds == [0, 1, 2]
    assert len(config.condition_grid) == 10
    assert [a.name for a in config.architectures] == ["cnn_freq", "vit_freq", "hybrid"]
    assert config.architectures[0].branch_mode is BranchMode.CNN_ONLY
    assert config.architectures[0].freq_enabled


def test_shipped_config_matches_defaults() -> None:
    shipped = load_config(DEFAULT_CONFIG_PATH)
    defaults = default_config()
    assert shipped.grid == defaults.grid
    assert shipped.architectures == defaults.architectures
    assert shipped.seeds == defaults.seeds


@pytest.mark.parametrize(
    "name",
    [
        "empty_file.json",
        "invalid_json.json",
        "missing_keys.json",
        "invalid_log_level.json",
        "seeds_not_a_list.json",
        "invalid_branch_mode.json",
        "unknown_train_key.json",
        "unknown_hybrid_key.json",
        "unknown_synth_key.json",
    ],
)
def test_invalid_configs(name: str) -> None:
    with pytest.raises(ConfigError):
        load_config(CONFIG_DIR / name)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        read_json_file(tmp_path / "nope.json")


def test_non_object_json(tmp_path: Path) -> None:
    path = tmp_path / "list.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_json_file(path)


def _raw() -> dict:
    return json.loads(DEFAULT_CONFIG_PATH.read_text(encoding="utf-8"))


@pytest.mark.parametrize(
    "key, value",
    [
        ("seeds", []),
        ("seeds", [1, 1]),
        ("seeds", [0, True]),
        ("grid", ["jpeg:60", "clean"]),
        ("grid", "clean"),
        ("architectures", []),
        ("architectures", [{"name": "a", "branch_mode": "hybrid"}, {"name": "a", "branch_mode": "cnn_only"}]),
        ("synth", {"sketch": {}}),
        ("input_size", 4),
        ("train", []),
        ("train", {"patience": 0}),
        ("hybrid", {"embed_dim": 0}),
        ("hybrid", {"branch_mode": "cnn_only"}),
        ("synth", {"photo": {"forensic_period": 3}}),
        ("synth", {"art": "big"}),
    ],
)
def test_validate_rejects(key: str, value: object) -> None:
    raw = _raw()
    raw[key] = value
    with pytest.raises(ConfigError):
        validate_raw_config(raw)


@pytest.mark.parametrize(
    "name, section, key",
    [
        ("unknown_train_key.json", "train", "learning_rate"),
        ("unknown_hybrid_key.json", "hybrid", "hidden_dim"),
        ("unknown_synth_key.json", "synth.art", "colour"),
    ],
)
def test_unknown_nested_keys_are_named(name: str, section: str, key: str) -> None:
    """A typo inside a nested section is a ConfigError naming the section and the key."""
    with pytest.raises(ConfigError, match=rf"{section} has unknown keys \['{key}'\]"):
        load_config(CONFIG_DIR / name)


def test_nested_contract_errors_become_config_errors() -> None:
    raw = _raw()
    raw["train"] = {"max_epochs": 2, "patience": 5}
    with pytest.raises(ConfigError, match="patience") as info:
        validate_raw_config(raw)
    assert info.value.__cause__ is not None


def test_log_level_is_case_insensitive() -> None:
    raw = _raw()
    raw["log_level"] = "debug"
    validate_raw_config(raw)
    assert parse_config(raw).log_level == "DEBUG"


def test_domain_and_model_settings() -> None:
    config = load_config(DEFAULT_CONFIG_PATH)
    spec = config.domain_spec("art")
    assert spec.name == "art"
    assert spec.n_per_class == 1500
    assert spec.image_size == 64

    hybrid = config.hybrid_config(config.architectures[1])
    assert hybrid.branch_mode is BranchMode.VIT_ONLY
    assert hybrid.freq_enabled
    assert config.train_config(7).seed == 7
    assert config.train_config(7).max_epochs == 20


def test_overrides_take_precedence() -> None:
    config = apply_overrides(default_config(), {"seeds": [5, 6], "out_dir": "elsewhere", "run_name": None})
    assert config.seeds == [5, 6]
    assert config.out_dir == "elsewhere"
    assert config.run_name == "spectrum"


def test_overrides_reject_unknown_and_invalid() -> None:
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), {"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), {"seeds": [3, 3]})


def test_to_dict_round_trip() -> None:
    config = default_config()
    raw = config.to_dict()
    validate_raw_config(raw)
    assert parse_config(raw) == config
