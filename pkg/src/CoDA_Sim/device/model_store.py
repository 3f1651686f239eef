"""Module providing the M / M0 / M_buf model version control of a device.

Slots hold serialized model blobs:

- M: the serving model, replaced only by ``commit``.
- M0: a copy of the first model saved, never modified afterwards.
- M_buf: the training buffer; exists only while a transaction is open.

``commit`` write-locks M, overwrites it with M_buf, unlocks, then deletes
M_buf. While M is write-locked inference is served from M0. When the store is
backed by a directory each step is mirrored to disk (``M.bin``, ``M0.bin``,
``M_buf.bin`` and a ``LOCK`` sentinel) with atomic file replacement, and
``open`` repairs a store interrupted between commit steps:

- LOCK and M_buf present: redo the overwrite, unlock, delete the buffer.
- M_buf present without LOCK: discard the buffer.
- LOCK present without M_buf: remove the stale sentinel.
"""

import logging
import os
import threading
from pathlib import Path
from typing import Callable, Dict, Tuple

from CoDA_Sim.core import exceptions, samples
from CoDA_Sim.mlkit import models, serialization

logger = logging.getLogger(__name__)

SERVING = "M"
BACKUP = "M0"
BUFFER = "M_buf"
LOCK_FILE = "LOCK"

COMMIT_STEPS = ("locked", "overwritten", "unlocked", "buffer_deleted")

CrashHook = Callable[[str], None]


def _slot_path(directory: Path, slot: str) -> Path:
    return directory / f"{slot}.bin"


def _atomic_write(path: Path, data: bytes) -> None:
    temp = path.with_name(path.name + ".tmp")
    with open(temp, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(temp, path)


class ModelStore:
    """Versioned model slots with write-lock routing.

    Attributes:
        directory: Backing directory, or None for an in-memory store.
        crash_hook: Called with each commit step name after the step; tests use
            it to inject crashes.
    """

    def __init__(
        self,
        directory: str | Path | None = None,
        crash_hook: CrashHook | None = None,
    ) -> None:
        """Initializes an empty store.

        Args:
            directory: Backing directory; created when missing.
            crash_hook: Commit step observer.
        """
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.crash_hook = crash_hook
        self._slots: Dict[str, bytes] = {}
        self._locked = False
        self._mutex = threading.Lock()
        self._decoded: Dict[str, Tuple[bytes, models.Model]] = {}

    @property
    def initialized(self) -> bool:
        """Whether a model has been saved."""
        return SERVING in self._slots

    @property
    def write_locked(self) -> bool:
        """Whether M is currently write-locked."""
        return self._locked

    @property
    def in_transaction(self) -> bool:
        """Whether a training transaction is open."""
        return BUFFER in self._slots

    def slot_bytes(self, slot: str) -> bytes | None:
        """Raw blob of a slot, None when the slot is empty."""
        return self._slots.get(slot)

    def _step(self, name: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(name)

    def _put(self, slot: str, blob: bytes) -> None:
        self._slots[slot] = blob
        if self.directory is not None:
            _atomic_write(_slot_path(self.directory, slot), blob)

    def _delete(self, slot: str) -> None:
        self._slots.pop(slot, None)
        if self.directory is not None:
            _slot_path(self.directory, slot).unlink(missing_ok=True)

    def _set_lock(self, locked: bool) -> None:
        with self._mutex:
            self._locked = locked
        if self.directory is None:
            return
        sentinel = self.directory / LOCK_FILE
        if locked:
            _atomic_write(sentinel, b"locked\n")
        else:
            sentinel.unlink(missing_ok=True)

    def initialize(self, model: models.Model) -> None:
        """Saves the first model as both M and M0.

        Raises:
            ValueError: If the store already holds a model.
        """
        if self.initialized:
            raise ValueError("Model store is already initialized.")
        blob = serialization.dumps(model)
        self._put(BACKUP, blob)
        with self._mutex:
            self._put(SERVING, blob)

    def _model(self, slot: str, blob: bytes) -> models.Model:
        cached = self._decoded.get(slot)
        if cached is not None and cached[0] is blob:
            return cached[1]
        model = serialization.loads(blob)
        self._decoded[slot] = (blob, model)
        return model

    def serving_model(self) -> models.Model:
        """The model inference must use right now: M0 while M is locked.

        Raises:
            ModelStoreUninitializedError: If no model has been saved.
        """
        with self._mutex:
            if not self.initialized:
                raise exceptions.ModelStoreUninitializedError(
                    "No model has been saved yet."
                )
            slot = BACKUP if self._locked else SERVING
            blob = self._slots[slot]
        return self._model(slot, blob)

    def infer(self, sample: samples.Sample) -> float:
        """CTR score of one sample under the routed model."""
        return self.serving_model().forward(sample)

    def begin_training(self) -> models.Model:
        """Opens a transaction: copies M to M_buf and returns it decoded.

        Raises:
            ModelStoreUninitializedError: If no model has been saved.
            TransactionOpenError: If a transaction is already open.
        """
        if not self.initialized:
            raise exceptions.ModelStoreUninitializedError(
                "No model has been saved yet."
            )
        if self.in_transaction:
            raise exceptions.TransactionOpenError("A transaction is already open.")
        blob = self._slots[SERVING]
        self._put(BUFFER, blob)
        return serialization.loads(blob)

    def update_buffer(self, model: models.Model) -> None:
        """Stores an accepted training state in M_buf.

        Raises:
            NoOpenTransactionError: If no transaction is open.
        """
        if not self.in_transaction:
            raise exceptions.NoOpenTransactionError("No open transaction.")
        self._put(BUFFER, serialization.dumps(model))

    def commit(self) -> None:
        """Replaces M with M_buf under the write lock and closes the transaction.

        Raises:
            NoOpenTransactionError: If no transaction is open.
        """
        if not self.in_transaction:
            raise exceptions.NoOpenTransactionError("No open transaction.")
        self._set_lock(True)
        self._step("locked")
        self._put(SERVING, self._slots[BUFFER])
        self._step("overwritten")
        self._set_lock(False)
        self._step("unlocked")
        self._delete(BUFFER)
        self._step("buffer_deleted")

    def rollback(self) -> None:
        """Discards M_buf, leaving M untouched.

        Raises:
            NoOpenTransactionError: If no transaction is open.
        """
        if not self.in_transaction:
            raise exceptions.NoOpenTransactionError("No open transaction.")
        self._delete(BUFFER)

    def commit_or_rollback(self, commit: bool) -> str:
        """Closes the open transaction; returns "commit" or "rollback"."""
        if commit:
            self.commit()
            return "commit"
        self.rollback()
        return "rollback"

    @classmethod
    def open(
        cls, directory: str | Path, crash_hook: CrashHook | None = None
    ) -> "ModelStore":
        """Loads a store from disk, repairing an interrupted commit.

        Args:
            directory: Backing directory.
            crash_hook: Commit step observer of the reopened store.

        Returns:
            The store, never locked and without an open transaction.
        """
        store = cls(directory, crash_hook)
        assert store.directory is not None
        root = store.directory
        for slot in (SERVING, BACKUP, BUFFER):
            path = _slot_path(root, slot)
            if path.exists():
                store._slots[slot] = path.read_bytes()
        for leftover in root.glob("*.tmp"):
            leftover.unlink()
        locked = (root / LOCK_FILE).exists()
        if locked and store.in_transaction:
            logger.warning("Completing an interrupted commit in %s.", root)
            store._put(SERVING, store._slots[BUFFER])
            (root / LOCK_FILE).unlink()
            store._delete(BUFFER)
        elif store.in_transaction:
            logger.warning("Discarding an unfinished training buffer in %s.", root)
            store._delete(BUFFER)
        elif locked:
            logger.warning("Removing a stale write lock in %s.", root)
            (root / LOCK_FILE).unlink()
        return store


def infer(model_store: ModelStore, sample: samples.Sample) -> float:
    """CTR score of a sample: M when unlocked, M0 while M is write-locked."""
    return model_store.infer(sample)


def commit_or_rollback(model_store: ModelStore, commit: bool) -> str:
    """Closes a model store transaction; see ``ModelStore.commit_or_rollback``."""
    return model_store.commit_or_rollback(commit)
