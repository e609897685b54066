from __future__ import annotations

import logging
from pathlib import Path
from typing import Any
from typing import Dict

import pytest
import tomli
from pydantic import ValidationError

import evoail.models as models
from evoail import presets

PUBLISHED = Path(__file__).parent / "data" / "published_presets.toml"


def test_sample_config(config: models.RunConfig):
    assert config.ra == "dail"
    assert config.optimizer == "ppo"
    assert config.env.id == "grid7"
    assert config.evolution.generations == 3
    assert config.evolution.topk == 4
    assert config.llm.mock_responses is None
    assert config.evoail.log_level == logging.INFO


def _sample_data(sample_config: str) -> Dict[str, Any]:
    data = tomli.loads(sample_config)
    data.pop("preset")
    return data


def test_sample_config_without_preset(sample_config: str):
    models.RunConfig(**_sample_data(sample_config))


def test_config_extra_field(sample_config: str, caplog: pytest.LogCaptureFixture):
    config = _sample_data(sample_config)
    config["foo"] = "bar"
    models.RunConfig(**config)
    assert len(caplog.records) == 1
    record = caplog.records[0]
    assert record.levelname == "WARNING"
    assert record.levelno == logging.WARNING
    assert "'foo'" in record.message


def test_config_extra_field_nested(sample_config: str, caplog: pytest.LogCaptureFixture):
    config = _sample_data(sample_config)
    config["ppo"]["learning_rate"] = 0.1
    models.RunConfig(**config)
    assert len(caplog.records) == 1
    assert "PPOConfig" in caplog.records[0].message
    assert "'learning_rate'" in caplog.records[0].message


def test_config_extra_field_allowed(
    sample_config: str, caplog: pytest.LogCaptureFixture
):
    config = _sample_data(sample_config)
    config["foo"] = "bar"

    # Allow extra fields for this test
    original_extra = models.RunConfig.model_config["extra"]
    try:
        models.RunConfig.model_config["extra"] = "allow"
        models.RunConfig(**config)
        assert len(caplog.records) == 0
    finally:
        models.RunConfig.model_config["extra"] = original_extra


@pytest.mark.parametrize(
    "level,expected",
    [
        ("DEBUG", logging.DEBUG),
        ("info", logging.INFO),
        ("Warning", logging.WARNING),
        (logging.ERROR, logging.ERROR),
        (50, logging.CRITICAL),
    ],
)
def test_log_level(level: Any, expected: int):
    settings = models.GeneralSettings(log_level=level)
    assert settings.log_level == expected
    assert settings.model_dump()["log_level"] == logging.getLevelName(expected)


@pytest.mark.parametrize("level", ["LOUD", 15, -1])
def test_log_level_invalid(level: Any):
    with pytest.raises(ValidationError):
        models.GeneralSettings(log_level=level)


@pytest.mark.parametrize("level", [True, 1.5, None])
def test_log_level_invalid_type(level: Any):
    with pytest.raises((ValidationError, TypeError)):
        models.GeneralSettings(log_level=level)


def test_output_dir_is_file(tmp_path: Path):
    path = tmp_path / "runs"
    path.write_text("not a directory")
    with pytest.raises(ValidationError) as exc_info:
        models.GeneralSettings(output_dir=path)
    assert "must be a directory" in str(exc_info.value)


@pytest.mark.parametrize("env_id", ["grid5", "grid7", "grid4x6", "chain"])
def test_env_id_valid(env_id: str):
    assert models.EnvSettings(id=env_id).id == env_id


@pytest.mark.parametrize("env_id", ["grid", "gridx", "cartpole", "chain2", ""])
def test_env_id_invalid(env_id: str):
    with pytest.raises(ValidationError):
        models.EnvSettings(id=env_id)


@pytest.mark.parametrize("ra", ["gail", "dail", "top3", "0.5*sigmoid(x)", "x"])
def test_ra_valid(ra: str):
    assert models.RunConfig(ra=ra).ra == ra


@pytest.mark.parametrize("ra", ["nonexistent", "x +", "foo(x)"])
def test_ra_invalid(ra: str):
    with pytest.raises(ValidationError):
        models.RunConfig(ra=ra)


def test_optimizer_config():
    config = models.RunConfig(optimizer="a2c")
    assert isinstance(config.optimizer_config, models.A2CConfig)
    assert config.optimizer_config.vf_coef == 5.0
    config = models.RunConfig()
    assert isinstance(config.optimizer_config, models.PPOConfig)


def test_optimizer_iterations():
    cfg = models.PPOConfig(num_envs=4, num_steps=32, total_timesteps=1000)
    assert cfg.batch_size == 128
    assert cfg.iterations == 7
    assert models.PPOConfig(total_timesteps=1).iterations == 1
    assert models.PPOConfig(hidden_width=16, hidden_layers=3).hidden == (16, 16, 16)


def test_llm_settings_defaults():
    settings = models.LLMSettings()
    assert settings.retries == 3
    assert settings.error_tolerance == 5
    assert settings.disable_duration > 0


def test_llm_settings_no_tolerance():
    """Setting no error tolerance raises error_duration so a single error
    stays on record long enough to disable the endpoint."""
    settings = models.LLMSettings(error_tolerance=0, error_duration=0)
    assert settings.error_tolerance == 0
    assert settings.error_duration > 0


def test_llm_settings_duration_negative():
    # We should not be able to pass in negative values to error_duration
    with pytest.raises(ValidationError) as exc_info:
        models.LLMSettings(error_duration=-1)
    errors = exc_info.value.errors()
    assert len(errors) == 1
    error = errors[0]
    assert error["loc"] == ("error_duration",)
    assert error["type"] == "greater_than_equal"


def test_evo_config_bounds():
    with pytest.raises(ValidationError):
        models.EvoConfig(pairs=0)
    with pytest.raises(ValidationError):
        models.EvoConfig(worst_fitness_factor=0)
    assert models.EvoConfig(generations=0).generations == 0


@pytest.mark.parametrize("preset", ["paper-minatar", "paper-brax"])
def test_published_presets(preset: str):
    """Presets reproduce the published hyperparameter tables."""
    with open(PUBLISHED, "rb") as f:
        golden = tomli.load(f)[preset]
    data = presets.get_preset(preset)
    for section, values in golden.items():
        for key, value in values.items():
            assert data[section][key] == value, f"{preset}.{section}.{key}"
    # Every preset must also validate
    models.RunConfig.model_validate(data)


def test_desk_preset_validates():
    config = models.load_config(preset="desk")
    assert config.ppo.total_timesteps == 200_000
    assert config.evolution.eval_seeds == 4


def test_get_preset_is_a_copy():
    data = presets.get_preset("desk")
    data["ppo"]["lr"] = 123.0
    assert presets.get_preset("desk")["ppo"]["lr"] != 123.0


def test_get_preset_unknown():
    with pytest.raises(ValueError) as exc_info:
        presets.get_preset("nope")
    assert "desk" in str(exc_info.value)


def test_load_config_precedence(tmp_path: Path):
    """Preset, then file, then overrides."""
    path = tmp_path / "config.toml"
    path.write_text(
        'preset = "paper-brax"\n'
        "[ppo]\n"
        "lr = 0.01\n"
        "num_envs = 4\n"
    )
    config = models.load_config(path, overrides={"ppo": {"num_envs": 2}})
    assert config.ppo.lr == 0.01
    assert config.ppo.num_envs == 2
    assert config.ppo.hidden_width == 256  # from the preset
    assert config.env.fixed_length is True

    # Explicit preset wins over the file's preset key
    config = models.load_config(path, preset="paper-minatar")
    assert config.ppo.hidden_width == 64
    assert config.ppo.lr == 0.01


def test_load_config_expands_env_vars(tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("EVOAIL_TEST_URL", "http://llm.example:9000/v1")
    path = tmp_path / "config.toml"
    path.write_text('[llm]\nbase_url = "${EVOAIL_TEST_URL}"\n')
    config = models.load_config(path)
    assert config.llm.base_url == "http://llm.example:9000/v1"


def test_load_config_no_file():
    config = models.load_config()
    assert config == models.RunConfig()
