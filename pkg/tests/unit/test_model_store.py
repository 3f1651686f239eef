"""Unit tests for the M / M0 / M_buf model version control."""

from pathlib import Path
from typing import List

import pytest

from CoDA_Sim.core import config, exceptions
from CoDA_Sim.device import model_store
from CoDA_Sim.mlkit import models, serialization, training
from tests.conftest import SampleFactory


class CrashError(Exception):
    """Raised by the crash hook to simulate power loss."""

    pass


@pytest.fixture
def versions(small_settings: config.ExperimentConfig) -> List[models.Model]:
    """Creates three distinct recommender models.

    Returns:
        Models seeded 0, 1 and 2.
    """
    return [training.new_recommender(small_settings, seed) for seed in range(3)]


def test_uninitialized_store_cannot_serve(make_sample: SampleFactory) -> None:
    """Tests inference and training before the first save.

    Args:
        make_sample: Fixture building samples.
    """
    store = model_store.ModelStore()

    with pytest.raises(exceptions.ModelStoreUninitializedError):
        model_store.infer(store, make_sample(1))
    with pytest.raises(exceptions.ModelStoreUninitializedError):
        store.begin_training()


def test_initialize_fills_serving_and_backup(versions: List[models.Model]) -> None:
    """Tests that M and M0 start identical and M0 cannot be overwritten.

    Args:
        versions: Fixture providing three models.
    """
    store = model_store.ModelStore()
    store.initialize(versions[0])

    assert store.slot_bytes(model_store.SERVING) == serialization.dumps(versions[0])
    assert store.slot_bytes(model_store.BACKUP) == store.slot_bytes(
        model_store.SERVING
    )
    assert store.slot_bytes(model_store.BUFFER) is None
    with pytest.raises(ValueError):
        store.initialize(versions[1])


def test_transaction_errors(versions: List[models.Model]) -> None:
    """Tests closing without a transaction and opening two.

    Args:
        versions: Fixture providing three models.
    """
    store = model_store.ModelStore()
    store.initialize(versions[0])

    with pytest.raises(exceptions.NoOpenTransactionError):
        model_store.commit_or_rollback(store, commit=True)
    with pytest.raises(exceptions.NoOpenTransactionError):
        store.rollback()
    with pytest.raises(exceptions.NoOpenTransactionError):
        store.update_buffer(versions[1])

    store.begin_training()
    with pytest.raises(exceptions.TransactionOpenError):
        store.begin_training()


def test_rollback_leaves_serving_model_untouched(
    versions: List[models.Model],
) -> None:
    """Tests that a rejected update never reaches M.

    Args:
        versions: Fixture providing three models.
    """
    store = model_store.ModelStore()
    store.initialize(versions[0])
    before = store.slot_bytes(model_store.SERVING)

    buffered = store.begin_training()
    store.update_buffer(versions[1])
    decision = model_store.commit_or_rollback(store, commit=False)

    assert decision == "rollback"
    assert store.slot_bytes(model_store.SERVING) == before
    assert serialization.dumps(buffered) == before
    assert not store.in_transaction


def test_commit_replaces_serving_model(
    versions: List[models.Model], make_sample: SampleFactory
) -> None:
    """Tests that commit moves the buffer into M and keeps M0.

    Args:
        versions: Fixture providing three models.
        make_sample: Fixture building samples.
    """
    store = model_store.ModelStore()
    store.initialize(versions[0])
    store.begin_training()
    store.update_buffer(versions[1])

    assert model_store.commit_or_rollback(store, commit=True) == "commit"

    assert store.slot_bytes(model_store.SERVING) == serialization.dumps(versions[1])
    assert store.slot_bytes(model_store.BACKUP) == serialization.dumps(versions[0])
    assert store.slot_bytes(model_store.BUFFER) is None
    assert not store.write_locked
    assert model_store.infer(store, make_sample(1)) == versions[1].forward(
        make_sample(1)
    )


def test_locked_model_routes_inference_to_backup(
    versions: List[models.Model], make_sample: SampleFactory
) -> None:
    """Tests that inference during the write lock uses M0, never M or M_buf.

    Args:
        versions: Fixture providing three models.
        make_sample: Fixture building samples.
    """
    sample = make_sample(1, behavior_seq=(4, 9, 16))
    observed = {}

    def observe(step: str) -> None:
        observed[step] = (store.write_locked, model_store.infer(store, sample))

    store = model_store.ModelStore(crash_hook=observe)
    store.initialize(versions[0])
    for update in versions[1:]:
        store.begin_training()
        store.update_buffer(update)
        store.commit()

    assert observed["locked"] == (True, versions[0].forward(sample))
    assert observed["overwritten"] == (True, versions[0].forward(sample))
    assert observed["unlocked"] == (False, versions[2].forward(sample))
    assert versions[1].forward(sample) != versions[0].forward(sample)


def test_disk_store_reopens_with_same_slots(
    versions: List[models.Model], tmp_path: Path
) -> None:
    """Tests the on-disk mirror.

    Args:
        versions: Fixture providing three models.
        tmp_path: Pytest temporary directory.
    """
    store = model_store.ModelStore(tmp_path)
    store.initialize(versions[0])
    store.begin_training()
    store.update_buffer(versions[1])
    store.commit()

    reopened = model_store.ModelStore.open(tmp_path)

    assert reopened.slot_bytes(model_store.SERVING) == serialization.dumps(
        versions[1]
    )
    assert reopened.slot_bytes(model_store.BACKUP) == serialization.dumps(
        versions[0]
    )
    assert not (tmp_path / model_store.LOCK_FILE).exists()
    assert not list(tmp_path.glob("*.tmp"))


@pytest.mark.parametrize("step", model_store.COMMIT_STEPS)
def test_crash_during_commit_recovers_new_model(
    versions: List[models.Model], tmp_path: Path, step: str
) -> None:
    """Tests that a crash after any commit step reopens unlocked with the update.

    Args:
        versions: Fixture providing three models.
        tmp_path: Pytest temporary directory.
        step: Commit step after which the crash happens.
    """

    def crash(name: str) -> None:
        if name == step:
            raise CrashError(name)

    store = model_store.ModelStore(tmp_path, crash_hook=crash)
    store.initialize(versions[0])
    store.begin_training()
    store.update_buffer(versions[1])
    with pytest.raises(CrashError):
        store.commit()

    reopened = model_store.ModelStore.open(tmp_path)

    assert reopened.slot_bytes(model_store.SERVING) == serialization.dumps(
        versions[1]
    )
    assert reopened.slot_bytes(model_store.BACKUP) == serialization.dumps(
        versions[0]
    )
    assert not reopened.write_locked
    assert not reopened.in_transaction
    assert not (tmp_path / model_store.LOCK_FILE).exists()
    assert not (tmp_path / "M_buf.bin").exists()


def test_crash_during_training_discards_buffer(
    versions: List[models.Model], tmp_path: Path
) -> None:
    """Tests that an unfinished transaction is dropped on reopen.

    Args:
        versions: Fixture providing three models.
        tmp_path: Pytest temporary directory.
    """
    store = model_store.ModelStore(tmp_path)
    store.initialize(versions[0])
    store.begin_training()
    store.update_buffer(versions[1])

    reopened = model_store.ModelStore.open(tmp_path)

    assert reopened.slot_bytes(model_store.SERVING) == serialization.dumps(
        versions[0]
    )
    assert not reopened.in_transaction


def test_stale_lock_is_removed(
    versions: List[models.Model], tmp_path: Path
) -> None:
    """Tests a LOCK sentinel left without a buffer.

    Args:
        versions: Fixture providing three models.
        tmp_path: Pytest temporary directory.
    """
    store = model_store.ModelStore(tmp_path)
    store.initialize(versions[0])
    (tmp_path / model_store.LOCK_FILE).write_bytes(b"locked\n")
    (tmp_path / "M.bin.tmp").write_bytes(b"partial")

    reopened = model_store.ModelStore.open(tmp_path)

    assert not reopened.write_locked
    assert not (tmp_path / model_store.LOCK_FILE).exists()
    assert not (tmp_path / "M.bin.tmp").exists()
    assert reopened.serving_model().hparams() == versions[0].hparams()
