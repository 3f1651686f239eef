"""Unit tests for the configuration module of CoDA_Sim."""

import dataclasses
from pathlib import Path

import pytest

from CoDA_Sim.core import config, exceptions


def test_defaults_match_deployment_values() -> None:
    """Tests that the defaults carry the deployed batch, storage and age values."""
    settings = config.ExperimentConfig()

    assert settings.cloud.k == 100
    assert settings.cloud.batch_size_default == 25
    assert settings.cloud.batch_size_max == 40
    assert settings.cloud.fragment_threshold == 15
    assert settings.cloud.retention_days == 7
    assert settings.tunnel.daily_limit == 12
    assert settings.device.local_limit == 200
    assert settings.device.outside_limit == 200
    assert settings.device.train_trigger == 100
    assert (settings.device.t, settings.device.t_prime) == (3, 7)
    assert settings.filter.sigma == 0.2
    assert settings.serve.explore_rate == 0.1
    assert settings.arms == ("cloud", "local", "coda")


def test_parse_dotted_and_table_forms_agree() -> None:
    """Tests that dotted keys and TOML tables resolve to the same config."""
    dotted = config.parse_config("cloud.k = 20\nfilter.sigma = 0.3\n")
    tables = config.parse_config("[cloud]\nk = 20\n\n[filter]\nsigma = 0.3\n")

    assert dotted == tables
    assert dotted.cloud.k == 20
    assert dotted.filter.sigma == 0.3


def test_parse_coerces_ints_to_floats_and_lists_to_tuples() -> None:
    """Tests type coercion of float fields and tuple fields."""
    settings = config.parse_config(
        'filter.sigma = 0\ntrain.classifier_hidden = [3, 2]\narms = ["coda"]\n'
    )

    assert settings.filter.sigma == 0.0
    assert isinstance(settings.filter.sigma, float)
    assert settings.train.classifier_hidden == (3, 2)
    assert settings.arms == ("coda",)


def test_experiment_section_sets_top_level_keys() -> None:
    """Tests that an [experiment] table addresses the top-level settings."""
    settings = config.parse_config("[experiment]\nseed = 11\ndays = 3\n")

    assert settings.seed == 11
    assert settings.days == 3


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("[cloud]\nbogus = 1\n", 2, "unknown key 'cloud.bogus'"),
        ("seed = 3\nnowhere.k = 1\n", 2, "unknown section 'nowhere'"),
        ('days = "ten"\n', 1, "'days' expects int"),
        ("seed = 3\ncloud.k = 0\n", 2, "cloud.k must be >= 1"),
        ("filter.sigma = 1.5\n", 1, "filter.sigma must lie in [0, 1]"),
        ("cloud.k = \n", 1, "invalid TOML"),
    ],
)
def test_parse_errors_carry_line_numbers(text: str, line: int, fragment: str) -> None:
    """Tests that invalid settings raise ConfigError pointing at their line.

    Args:
        text: TOML source.
        line: Expected 1-based line of the error.
        fragment: Expected part of the message.
    """
    with pytest.raises(exceptions.ConfigError) as excinfo:
        config.parse_config(text)

    assert excinfo.value.line == line
    assert fragment in str(excinfo.value)


def test_parse_error_with_source_prefixes_path() -> None:
    """Tests the path:line: prefix used by the command line."""
    with pytest.raises(exceptions.ConfigError) as excinfo:
        config.parse_config("cloud.k = 0\n", source="bench.toml")

    assert str(excinfo.value).startswith("bench.toml:1: ")
    assert excinfo.value.path == "bench.toml"


def test_load_config_missing_file(tmp_path: Path) -> None:
    """Tests that a missing file raises ConfigError naming the path."""
    missing = tmp_path / "missing.toml"

    with pytest.raises(exceptions.ConfigError) as excinfo:
        config.load_config(missing)

    assert excinfo.value.path == str(missing)
    assert excinfo.value.line is None


def test_load_config_reads_file(tmp_path: Path) -> None:
    """Tests loading a TOML file from disk."""
    path = tmp_path / "bench.toml"
    path.write_text("seed = 5\ndevice.t_prime = 9\n", encoding="utf-8")

    settings = config.load_config(path)

    assert settings.seed == 5
    assert settings.device.t_prime == 9


def test_apply_overrides() -> None:
    """Tests TOML-typed overrides and bare-word strings."""
    settings = config.apply_overrides(
        config.ExperimentConfig(), ["cloud.k=20", "cloud.index=ivf", "jobs = 4"]
    )

    assert settings.cloud.k == 20
    assert settings.cloud.index == "ivf"
    assert settings.jobs == 4


def test_sigma_lives_in_filter_section() -> None:
    """Tests the documented sigma override and the section it is not in."""
    settings = config.apply_overrides(config.ExperimentConfig(), ["filter.sigma=0.3"])

    assert settings.filter.sigma == 0.3
    with pytest.raises(exceptions.ConfigError, match="unknown key 'device.sigma'"):
        config.apply_overrides(config.ExperimentConfig(), ["device.sigma=0.3"])


@pytest.mark.parametrize("override", ["cloud.k", "=3", "cloud.k=-1", "arms=[]"])
def test_apply_overrides_rejects_invalid(override: str) -> None:
    """Tests that malformed or invalid overrides raise ConfigError.

    Args:
        override: The rejected override.
    """
    with pytest.raises(exceptions.ConfigError):
        config.apply_overrides(config.ExperimentConfig(), [override])


def test_validate_rejects_t_after_t_prime() -> None:
    """Tests the ordering check of the local sample age bands."""
    settings = dataclasses.replace(
        config.ExperimentConfig(),
        device=dataclasses.replace(config.DeviceConfig(), t=8, t_prime=7),
    )

    with pytest.raises(exceptions.ConfigError, match="t_prime"):
        config.validate(settings)


def test_find_key_line_unknown_key() -> None:
    """Tests that keys absent from the text have no line."""
    assert config.find_key_line("seed = 1\n", "cloud.k") is None


def test_dump_config_is_read_back_unchanged(
    small_settings: config.ExperimentConfig,
) -> None:
    """Tests that the echoed config.toml resolves to the same settings.

    Args:
        small_settings: Fixture providing a non-default config.
    """
    text = config.dump_config(small_settings)

    assert "cloud.k = 3\n" in text
    assert config.parse_config(text) == small_settings
