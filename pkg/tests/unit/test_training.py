"""Unit tests for the shared SGD loops."""

import dataclasses

import numpy as np
import pytest

from CoDA_Sim.core import config, exceptions
from CoDA_Sim.mlkit import training
from tests.conftest import SampleFactory


def test_minibatch_indices_cover_range_once() -> None:
    """Tests that one pass visits every index exactly once."""
    blocks = list(training.minibatch_indices(10, 4, np.random.default_rng(0)))

    assert [len(block) for block in blocks] == [4, 4, 2]
    assert sorted(np.concatenate(blocks).tolist()) == list(range(10))


def test_minibatch_indices_rejects_zero_batch() -> None:
    """Tests the batch size check."""
    with pytest.raises(ValueError):
        list(training.minibatch_indices(3, 0, np.random.default_rng(0)))


def test_train_report_checks_metric_range() -> None:
    """Tests that a metric outside [0, 1] is rejected."""
    with pytest.raises(ValueError):
        training.TrainReport(0.1, 1.5, 3)


def test_score_metric_falls_back_to_accuracy() -> None:
    """Tests AUC on two classes and accuracy on one."""
    assert training.score_metric(np.array([0.9, 0.2]), np.array([1, 0])) == 1.0
    assert training.score_metric(np.array([0.9, 0.2]), np.array([1, 1])) == 0.5
    assert training.score_metric(np.array([]), np.array([])) == 0.0


def test_fit_on_empty_data_takes_no_step(
    small_settings: config.ExperimentConfig,
) -> None:
    """Tests that fitting nothing returns an unchanged copy.

    Args:
        small_settings: Fixture providing small settings.
    """
    model = training.new_recommender(small_settings, 0)

    trained, report = training.fit(
        model, [], [], 0.1, 1, 16, np.random.default_rng(0)
    )

    assert report.steps == 0
    assert np.isnan(report.final_loss)
    assert trained is not model


def test_fit_rejects_label_mismatch(
    small_settings: config.ExperimentConfig, make_sample: SampleFactory
) -> None:
    """Tests that every sample needs one label.

    Args:
        small_settings: Fixture providing small settings.
        make_sample: Fixture building samples.
    """
    model = training.new_recommender(small_settings, 0)

    with pytest.raises(ValueError):
        training.fit(
            model, [make_sample(1)], [1, 0], 0.1, 1, 16, np.random.default_rng(0)
        )


@pytest.fixture
def wide_init(small_settings: config.ExperimentConfig) -> config.ExperimentConfig:
    """Creates settings whose models start with larger weights.

    Returns:
        The small settings with init_scale 0.5.
    """
    return dataclasses.replace(
        small_settings,
        train=dataclasses.replace(small_settings.train, init_scale=0.5),
    )


def test_fit_learns_separable_toy_data(
    wide_init: config.ExperimentConfig, make_sample: SampleFactory
) -> None:
    """Tests that pooled separable data reaches a training AUC above 0.9.

    Args:
        wide_init: Fixture providing settings with larger initial weights.
        make_sample: Fixture building samples.
    """
    data = [
        make_sample(
            i,
            label=i % 2,
            behavior_seq=(10, 11, 12) if i % 2 else (30, 31, 32),
            behavior_stats=(1.0, 0.0, 0.0, 0.0) if i % 2 else (0.0, 0.0, 0.0, 1.0),
            target_item=i % 4,
        )
        for i in range(64)
    ]
    model = training.new_recommender(wide_init, 0)

    _, report = training.fit(
        model,
        data,
        [s.label for s in data],
        lr=0.5,
        epochs=40,
        batch_size=16,
        rng=np.random.default_rng(0),
    )

    assert report.steps == 40 * 4
    assert report.acc > 0.9


def test_fit_balanced_needs_both_classes(
    small_settings: config.ExperimentConfig, make_sample: SampleFactory
) -> None:
    """Tests that an empty class raises DegenerateDataError.

    Args:
        small_settings: Fixture providing small settings.
        make_sample: Fixture building samples.
    """
    model = training.new_classifier(small_settings, 0)

    with pytest.raises(exceptions.DegenerateDataError):
        training.fit_balanced(
            model, [make_sample(1)], [], 0.1, 5, 16, np.random.default_rng(0)
        )


def test_fit_balanced_separates_disjoint_token_sets(
    wide_init: config.ExperimentConfig, make_sample: SampleFactory
) -> None:
    """Tests that the classifier separates held-out local and outside samples.

    Local samples draw tokens from [0, 20), outside samples from [20, 40).

    Args:
        wide_init: Fixture providing settings with larger initial weights.
        make_sample: Fixture building samples.
    """
    rng = np.random.default_rng(5)

    def draw(offset: int, count: int, start: int) -> list:
        return [
            make_sample(
                start + i,
                behavior_seq=tuple(
                    int(t) for t in offset + rng.integers(0, 20, size=8)
                ),
            )
            for i in range(count)
        ]

    local, outside = draw(0, 60, 0), draw(20, 60, 100)
    classifier = training.new_classifier(wide_init, 0)

    trained, report = training.fit_balanced(
        classifier,
        local,
        outside,
        lr=0.5,
        steps=300,
        batch_size=16,
        rng=np.random.default_rng(0),
    )

    heldout = draw(0, 40, 200) + draw(20, 40, 300)
    labels = np.array([1] * 40 + [0] * 40)
    assert report.steps == 300
    assert training.score_metric(trained.predict(heldout), labels) > 0.9
