"""Unit tests for the per-device driver."""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from CoDA_Sim.cloud import match_index
from CoDA_Sim.core import config, exceptions, samples, synthdata
from CoDA_Sim.device import model_store, runtime
from CoDA_Sim.mlkit import models, serialization, training
from CoDA_Sim.tunnel import inlet, uplink
from tests.conftest import SampleFactory


@pytest.fixture
def global_model(small_settings: config.ExperimentConfig) -> models.Model:
    """Creates the model every device starts from.

    Returns:
        A seeded recommender.
    """
    return training.new_recommender(small_settings, 0)


@pytest.fixture
def coda_inlet(
    population: synthdata.Population,
) -> inlet.BatchInlet:
    """Creates an inlet for device 0 over two 25-sample batches.

    Returns:
        The inlet.
    """
    index = match_index.MatchIndex()
    matched = [
        sample
        for user_id in range(1, 6)
        for sample in population.gen_day(user_id, 0, 10)
    ]
    index.build_batches(0, matched, day=0)
    return inlet.BatchInlet(0, inlet.Transport(index))


def _exposure(
    sample: samples.Sample, explore_draw: float, explore_animation: int = 2
) -> synthdata.Exposure:
    return synthdata.Exposure(sample, 0.5, explore_draw, explore_animation)


def test_choose_animations_explores_and_exploits(
    global_model: models.Model, make_sample: SampleFactory
) -> None:
    """Tests exploration draws and the argmax over animation variants.

    Args:
        global_model: Fixture providing the global model.
        make_sample: Fixture building samples.
    """
    context = make_sample(1, behavior_seq=(3, 8, 9))
    exposures = [_exposure(context, 0.05), _exposure(context, 0.5)]
    expected = int(
        np.argmax(
            [
                global_model.forward(dataclasses.replace(context, animation=a))
                for a in config.ANIMATIONS
            ]
        )
    )

    chosen = runtime.choose_animations(global_model, exposures, explore_rate=0.1)

    assert chosen == [2, expected]
    assert runtime.choose_animations(global_model, [], 0.1) == []


def test_choose_animations_ties_go_to_lowest_index(
    global_model: models.Model, make_sample: SampleFactory
) -> None:
    """Tests that a zero-weight model always serves the first animation.

    Args:
        global_model: Fixture providing the global model.
        make_sample: Fixture building samples.
    """
    for name in global_model.params:
        global_model.params[name] = np.zeros_like(global_model.params[name])

    chosen = runtime.choose_animations(
        global_model, [_exposure(make_sample(1), 0.9)], explore_rate=0.1
    )

    assert chosen == [0]


def test_arm_checks(
    small_settings: config.ExperimentConfig, global_model: models.Model
) -> None:
    """Tests an unknown arm and a coda device without an inlet.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
    """
    with pytest.raises(ValueError):
        runtime.DeviceRuntime(0, "edge", small_settings, global_model)
    with pytest.raises(ValueError):
        runtime.DeviceRuntime(0, runtime.ARM_CODA, small_settings, global_model)


def test_cloud_arm_does_no_learning(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    make_sample: SampleFactory,
) -> None:
    """Tests that the cloud arm serves the global model unchanged.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        make_sample: Fixture building samples.
    """
    device = runtime.DeviceRuntime(
        0, runtime.ARM_CLOUD, small_settings, global_model
    )
    device.store.add_local(make_sample(i, day=0, label=i % 2) for i in range(20))

    stats = device.learn(day=5)

    assert dataclasses.replace(stats, task_seconds=0.0) == runtime.DeviceDayStats()
    assert device.drain_events() == []
    assert device.model_store.slot_bytes("M") == serialization.dumps(global_model)


def test_local_arm_trains_daily(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    make_sample: SampleFactory,
) -> None:
    """Tests one gated training pass on local samples.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        make_sample: Fixture building samples.
    """
    device = runtime.DeviceRuntime(
        0, runtime.ARM_LOCAL, small_settings, global_model
    )
    device.store.add_local(
        make_sample(i, day=i % 8, label=i % 2, behavior_seq=(i % 40, 1))
        for i in range(40)
    )

    stats = device.learn(day=7)
    events = device.drain_events()

    assert stats.trainings == 1
    assert stats.pulls == 0
    assert [e.kind for e in events] in (["commit"], ["rollback"])
    assert events[0].detail["reason"] == "daily"
    assert device.drain_events() == []


def test_coda_arm_pulls_filters_and_trains(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    coda_inlet: inlet.BatchInlet,
    population: synthdata.Population,
) -> None:
    """Tests a coda day over two batches.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        coda_inlet: Fixture providing an inlet with two batches.
        population: Fixture providing the population.
    """
    device = runtime.DeviceRuntime(
        0, runtime.ARM_CODA, small_settings, global_model, coda_inlet
    )
    device.store.add_local(population.gen_day(0, 0, 20))

    stats = device.learn(day=1)
    kinds = [e.kind for e in device.drain_events()]

    assert stats.pulls == 2
    assert stats.kept + stats.discarded == 2 * 17
    assert stats.payload_chars > 0
    assert device.classifier_trained
    assert inlet.NO_MORE_BATCHES in kinds
    assert len(device.store.augmented()) <= stats.kept


def test_coda_arm_without_local_samples_discards(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    coda_inlet: inlet.BatchInlet,
) -> None:
    """Tests that no classifier means no filtered samples.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        coda_inlet: Fixture providing an inlet with two batches.
    """
    device = runtime.DeviceRuntime(
        0, runtime.ARM_CODA, small_settings, global_model, coda_inlet
    )

    stats = device.learn(day=1)
    kinds = [e.kind for e in device.drain_events()]

    assert stats.kept == 0
    assert stats.discarded == 2 * 17
    assert kinds.count("classifier_skipped") == 2
    assert not device.classifier_trained


def test_dropped_pulls_are_retried_then_reported(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    coda_inlet: inlet.BatchInlet,
) -> None:
    """Tests that an always-failing transport ends pulling with an event.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        coda_inlet: Fixture providing an inlet with two batches.
    """
    coda_inlet.transport.failure_rate = 0.999999
    device = runtime.DeviceRuntime(
        0, runtime.ARM_CODA, small_settings, global_model, coda_inlet
    )

    stats = device.learn(day=1)
    events = device.drain_events()

    assert stats.pulls == 0
    assert [e.kind for e in events] == ["transport_failed"]
    assert events[0].detail == {"retries": small_settings.tunnel.max_retries}


def test_run_day_serves_and_stores(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    population: synthdata.Population,
) -> None:
    """Tests that served samples become local samples and logs are reported.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        population: Fixture providing the population.
    """
    device = runtime.DeviceRuntime(
        2, runtime.ARM_CLOUD, small_settings, global_model
    )
    exposures = population.gen_exposures(2, 3, 5)

    day = device.run_day(3, exposures, population)
    log_store = uplink.CloudLogStore()
    device.flush_logs(log_store)

    assert len(day.served) == 5
    assert [s.sample_id for s in device.store.local_samples()] == [
        s.sample_id for s in day.served
    ]
    assert log_store.count("exposure", day=3) == 5
    assert log_store.count("click", day=3) == sum(s.label for s in day.served)
    assert device.logs == []


def test_heldout_auc_needs_both_classes(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    make_sample: SampleFactory,
) -> None:
    """Tests the held-out metric and its single-class case.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        make_sample: Fixture building samples.
    """
    device = runtime.DeviceRuntime(
        0, runtime.ARM_CLOUD, small_settings, global_model
    )
    mixed = [make_sample(i, label=i % 2, behavior_seq=(i, 2)) for i in range(10)]

    assert device.heldout_auc([make_sample(1, label=1)]) is None
    assert device.heldout_auc([]) is None
    assert 0.0 <= device.heldout_auc(mixed) <= 1.0


def test_trigger_fires_once_per_fresh_kept_samples(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    population: synthdata.Population,
    make_sample: SampleFactory,
) -> None:
    """Tests that samples already trained on never re-fire the trigger.

    Four batches keep 17 samples each; with a trigger of 30 the second and
    fourth batch train, the first and third do not.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        population: Fixture providing the population.
        make_sample: Fixture building samples.
    """
    settings = dataclasses.replace(
        small_settings,
        device=dataclasses.replace(small_settings.device, train_trigger=30),
        filter=dataclasses.replace(small_settings.filter, sigma=0.0),
    )
    index = match_index.MatchIndex()
    matched = [
        sample
        for user_id in range(1, 6)
        for sample in population.gen_day(user_id, 0, 20)
    ]
    index.build_batches(0, matched, day=0)
    device = runtime.DeviceRuntime(
        0,
        runtime.ARM_CODA,
        settings,
        global_model,
        inlet.BatchInlet(0, inlet.Transport(index)),
    )
    device.store.add_local(
        make_sample(i, day=1, label=i % 2, behavior_seq=(i, 4)) for i in range(10)
    )

    stats = device.learn(day=1)
    reasons = [
        e.detail["reason"]
        for e in device.drain_events()
        if e.kind in ("commit", "rollback")
    ]

    assert stats.pulls == 4
    assert stats.kept == 4 * 17
    assert stats.trainings == 2
    assert reasons == ["trigger", "trigger"]
    assert device.store.augmented() == []


def test_classifier_commit_survives_crash_and_restore(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    coda_inlet: inlet.BatchInlet,
    population: synthdata.Population,
    tmp_path: Path,
) -> None:
    """Tests a crash inside the classifier commit, then a restart from disk.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        coda_inlet: Fixture providing an inlet with two batches.
        population: Fixture providing the population.
        tmp_path: Pytest temporary directory.
    """
    device = runtime.DeviceRuntime(
        0, runtime.ARM_CODA, small_settings, global_model, coda_inlet, tmp_path
    )
    device.store.add_local(population.gen_day(0, 0, 20))
    device.save_state()
    untrained = device.classifier_store.slot_bytes(model_store.SERVING)

    def crash(step: str) -> None:
        if step == "overwritten":
            raise RuntimeError("power loss")

    device.classifier_store.crash_hook = crash
    with pytest.raises(RuntimeError):
        device.learn(day=1)
    restored = runtime.DeviceRuntime.restore(
        0, runtime.ARM_CODA, small_settings, tmp_path, coda_inlet
    )

    assert not (tmp_path / runtime.CLASSIFIER_DIR / model_store.LOCK_FILE).exists()
    assert not restored.classifier_store.in_transaction
    assert restored.classifier_store.slot_bytes(model_store.SERVING) != untrained
    assert restored.classifier_trained
    assert restored.model_store.slot_bytes(model_store.SERVING) == (
        serialization.dumps(global_model)
    )
    assert len(restored.store.local) == 20


def test_run_day_saves_sample_tables(
    small_settings: config.ExperimentConfig,
    global_model: models.Model,
    population: synthdata.Population,
    tmp_path: Path,
) -> None:
    """Tests that a restored device sees the samples served before.

    Args:
        small_settings: Fixture providing small settings.
        global_model: Fixture providing the global model.
        population: Fixture providing the population.
        tmp_path: Pytest temporary directory.
    """
    device = runtime.DeviceRuntime(
        1, runtime.ARM_LOCAL, small_settings, global_model, state_dir=tmp_path
    )

    day = device.run_day(2, population.gen_exposures(1, 2, 5), population)
    restored = runtime.DeviceRuntime.restore(
        1, runtime.ARM_LOCAL, small_settings, tmp_path
    )

    assert restored.store.local == device.store.local
    assert sorted(restored.store.local) == sorted(s.sample_id for s in day.served)
    assert not restored.classifier_trained


def test_restore_needs_saved_models(
    small_settings: config.ExperimentConfig, tmp_path: Path
) -> None:
    """Tests that an empty state directory cannot be restored.

    Args:
        small_settings: Fixture providing small settings.
        tmp_path: Pytest temporary directory.
    """
    with pytest.raises(exceptions.ModelStoreUninitializedError):
        runtime.DeviceRuntime.restore(
            0, runtime.ARM_LOCAL, small_settings, tmp_path
        )
