"""Unit tests for the versioned model blob format."""

import struct

import numpy as np
import pytest

from CoDA_Sim.core import config, exceptions
from CoDA_Sim.mlkit import models, serialization, training
from tests.conftest import SampleFactory


@pytest.mark.parametrize("kind", ["classifier", "recommender"])
def test_blob_restores_bitwise_parameters(
    small_settings: config.ExperimentConfig,
    make_sample: SampleFactory,
    kind: str,
) -> None:
    """Tests that loading a blob restores class, seed and exact parameters.

    Args:
        small_settings: Fixture providing small settings.
        make_sample: Fixture building samples.
        kind: Which model to serialize.
    """
    if kind == "classifier":
        model: models.Model = training.new_classifier(small_settings, 9)
    else:
        model = training.new_recommender(small_settings, 9)

    restored = serialization.loads(serialization.dumps(model))

    assert type(restored) is type(model)
    assert restored.seed == 9
    assert restored.hparams() == model.hparams()
    for name, value in model.params.items():
        assert restored.params[name].tobytes() == value.tobytes()
    assert restored.forward(make_sample(1)) == model.forward(make_sample(1))


def test_dumps_is_deterministic(small_settings: config.ExperimentConfig) -> None:
    """Tests that equal parameters always give equal bytes.

    Args:
        small_settings: Fixture providing small settings.
    """
    model = training.new_recommender(small_settings, 2)

    blob = serialization.dumps(model)

    assert blob.startswith(serialization.MAGIC)
    assert serialization.dumps(model.copy()) == blob
    assert serialization.dumps(serialization.loads(blob)) == blob


def _blob(small_settings: config.ExperimentConfig) -> bytes:
    return serialization.dumps(training.new_classifier(small_settings, 0))


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
        (lambda b: b[:6] + bytes([7]) + b[7:], "kind"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00", "Trailing"),
    ],
)
def test_loads_rejects_malformed_blobs(
    small_settings: config.ExperimentConfig, mutate: object, message: str
) -> None:
    """Tests that damaged blobs raise ModelFormatError.

    Args:
        small_settings: Fixture providing small settings.
        mutate: Function damaging the blob.
        message: Expected part of the message.
    """
    damaged = mutate(_blob(small_settings))  # type: ignore[operator]

    with pytest.raises(exceptions.ModelFormatError, match=message):
        serialization.loads(damaged)


def test_loads_keeps_non_finite_values(
    small_settings: config.ExperimentConfig,
) -> None:
    """Tests that the format stores raw float64 values, NaN included.

    Args:
        small_settings: Fixture providing small settings.
    """
    model = training.new_classifier(small_settings, 0)
    model.params["output/b"] = np.array([np.nan])

    restored = serialization.loads(serialization.dumps(model))

    assert np.isnan(restored.params["output/b"][0])
