"""Unit tests for the file-based pipeline stages."""

import json
from pathlib import Path

import pytest

from CoDA_Sim.core import config, exceptions, metrics, samples
from CoDA_Sim.mlkit import models, serialization
from CoDA_Sim.presenters import stages
from tests.conftest import SampleFactory


@pytest.fixture
def generated(small_settings: config.ExperimentConfig, tmp_path: Path) -> Path:
    """Runs the gen stage.

    Returns:
        Path of the generated sample file.
    """
    return stages.run_stage("gen", [], tmp_path / "gen", small_settings)[0]


def test_gen_writes_every_user_day(
    generated: Path, small_settings: config.ExperimentConfig
) -> None:
    """Tests the number of generated samples.

    Args:
        generated: Fixture providing the generated sample file.
        small_settings: Fixture providing small settings.
    """
    loaded = samples.read_samples(generated)

    assert len(loaded) == 6 * small_settings.days * 5
    assert {s.user_id for s in loaded} == set(range(6))


def test_encode_then_decode_is_byte_identical(
    generated: Path, small_settings: config.ExperimentConfig, tmp_path: Path
) -> None:
    """Tests that chaining encode and decode reproduces the input file.

    Args:
        generated: Fixture providing the generated sample file.
        small_settings: Fixture providing small settings.
        tmp_path: Pytest temporary directory.
    """
    (payload,) = stages.run_stage("encode", [generated], tmp_path, small_settings)
    (decoded,) = stages.run_stage(
        "decode", [payload], tmp_path / "dec", small_settings
    )

    assert decoded.read_bytes() == generated.read_bytes()


def test_match_agrees_with_oracle(
    generated: Path, small_settings: config.ExperimentConfig, tmp_path: Path
) -> None:
    """Tests that the index neighbors equal the brute-force lists.

    Args:
        generated: Fixture providing the generated sample file.
        small_settings: Fixture providing small settings.
        tmp_path: Pytest temporary directory.
    """
    matches_path, oracle_path = stages.run_stage(
        "match", [generated], tmp_path, small_settings
    )
    matches = [json.loads(line) for line in matches_path.read_text().splitlines()]
    oracle = [json.loads(line) for line in oracle_path.read_text().splitlines()]

    assert [m["user_id"] for m in matches] == list(range(6))
    assert [m["neighbors"] for m in matches] == [o["neighbors"] for o in oracle]
    assert all(len(m["neighbors"]) == 3 for m in matches)


def test_filter_stage(
    small_settings: config.ExperimentConfig,
    make_sample: SampleFactory,
    tmp_path: Path,
) -> None:
    """Tests the kept file and summary of the filter stage.

    Args:
        small_settings: Fixture providing small settings.
        make_sample: Fixture building samples.
        tmp_path: Pytest temporary directory.
    """
    local = tmp_path / "local.ldjson"
    matched = tmp_path / "matched.ldjson"
    samples.write_samples(local, [make_sample(i) for i in range(10)])
    samples.write_samples(
        matched, [make_sample(100 + i, user_id=1) for i in range(9)]
    )

    kept_path, summary_path = stages.run_stage(
        "filter", [local, matched], tmp_path / "out", small_settings
    )
    summary = json.loads(summary_path.read_text())

    assert summary["classifier_samples"] == 3
    assert summary["kept"] + summary["discarded"] == 6
    assert len(samples.read_samples(kept_path)) == summary["kept"]
    assert all(score >= summary["sigma"] for score in summary["scores"])


def test_filter_stage_without_local_samples(
    small_settings: config.ExperimentConfig,
    make_sample: SampleFactory,
    tmp_path: Path,
) -> None:
    """Tests that filtering without positives is reported as degenerate.

    Args:
        small_settings: Fixture providing small settings.
        make_sample: Fixture building samples.
        tmp_path: Pytest temporary directory.
    """
    local = tmp_path / "local.ldjson"
    matched = tmp_path / "matched.ldjson"
    samples.write_samples(local, [])
    samples.write_samples(matched, [make_sample(1)] * 3)

    with pytest.raises(exceptions.DegenerateDataError):
        stages.run_stage("filter", [local, matched], tmp_path, small_settings)


def test_train_stage_with_validation(
    generated: Path, small_settings: config.ExperimentConfig, tmp_path: Path
) -> None:
    """Tests the model blob and report of the train stage.

    Args:
        generated: Fixture providing the generated sample file.
        small_settings: Fixture providing small settings.
        tmp_path: Pytest temporary directory.
    """
    model_path, report_path = stages.run_stage(
        "train", [generated, generated], tmp_path, small_settings
    )
    report = json.loads(report_path.read_text())

    assert isinstance(
        serialization.loads(model_path.read_bytes()), models.RecommenderModel
    )
    assert report["steps"] == 4
    assert 0.0 <= report["validation_metric"] <= 1.0


def test_metrics_stage(small_settings: config.ExperimentConfig, tmp_path: Path) -> None:
    """Tests recomputing ratios from an event log.

    Args:
        small_settings: Fixture providing small settings.
        tmp_path: Pytest temporary directory.
    """
    events = tmp_path / "events.ldjson"
    records = [
        metrics.ExposureEvent("coda", 0, user_id, int(user_id == 0)).to_record()
        for user_id in range(4)
    ]
    events.write_text("".join(json.dumps(r) + "\n" for r in records))

    csv_path, ratios_path = stages.run_stage(
        "metrics", [events], tmp_path / "out", small_settings
    )
    ratios = json.loads(ratios_path.read_text())

    assert ratios["coda"]["ctr"] == 0.25
    assert ratios["coda"]["clk_uv_per_exp_uv"] == 0.25
    assert csv_path.read_text().startswith("arm,day,metric,value")


def test_unknown_stage_and_input_count(
    small_settings: config.ExperimentConfig, tmp_path: Path
) -> None:
    """Tests the stage name and arity checks.

    Args:
        small_settings: Fixture providing small settings.
        tmp_path: Pytest temporary directory.
    """
    with pytest.raises(exceptions.UnknownStageError):
        stages.run_stage("compress", [], tmp_path, small_settings)
    with pytest.raises(ValueError, match="takes 1 input"):
        stages.run_stage("encode", [], tmp_path, small_settings)
    with pytest.raises(ValueError, match="1 to 2"):
        stages.run_stage("train", [], tmp_path, small_settings)
