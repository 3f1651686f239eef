"""Module providing the deduplicated batch/sample store behind batch queries.

Two mappings back every query:

- batch map: batch id -> (owner, day, ordered sample ids)
- sample map: sample id -> zlib-compressed canonical JSON of the sample

A sample matched to many users is stored once and reference counted by the
batches that list it. Readers (``query_batch``, ``list_batches``) share a lock;
writers (``build_batches``, ``gc_expired``, ``load``) hold it exclusively.
"""

import contextlib
import dataclasses
import json
import logging
import struct
import threading
import zlib
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Set, Tuple

from CoDA_Sim.core import config, exceptions, samples
from CoDA_Sim.tunnel import codec

logger = logging.getLogger(__name__)

BATCHES_FILE = "batches.jsonl"
SAMPLES_FILE = "samples.bin"
INDEX_FILE = "samples.idx"
_ID_BYTES = 8


class ReadWriteLock:
    """Many concurrent readers or one writer."""

    def __init__(self) -> None:
        """Initializes an unlocked lock."""
        self._condition = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False

    @contextlib.contextmanager
    def read(self) -> Iterator[None]:
        """Holds the lock shared."""
        with self._condition:
            while self._writer:
                self._condition.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._condition:
                self._readers -= 1
                if self._readers == 0:
                    self._condition.notify_all()

    @contextlib.contextmanager
    def write(self) -> Iterator[None]:
        """Holds the lock exclusively."""
        with self._condition:
            while self._writer or self._readers:
                self._condition.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._condition:
                self._writer = False
                self._condition.notify_all()


@dataclasses.dataclass(frozen=True)
class BatchRecord:
    """One entry of the batch map.

    Attributes:
        batch_id: Id handed to the device.
        user_id: Owner of the batch.
        day: Matching day the batch was built on.
        sample_ids: Ordered ids resolved through the sample map.
    """

    batch_id: str
    user_id: int
    day: int
    sample_ids: Tuple[int, ...]


def split_sizes(
    n: int, batch_size: int = 25, batch_size_max: int = 40, fragment: int = 15
) -> List[int]:
    """Sizes of the batches n samples are cut into.

    Batches hold ``batch_size`` samples. A trailing remainder smaller than
    ``fragment`` is merged into the previous batch when the result stays within
    ``batch_size_max``; otherwise it forms a batch of its own.

    Examples:
        50 -> [25, 25]; 64 -> [25, 39]; 66 -> [25, 25, 16].
    """
    full, remainder = divmod(n, batch_size)
    sizes = [batch_size] * full
    if remainder:
        merge = remainder < fragment and batch_size + remainder <= batch_size_max
        if sizes and merge:
            sizes[-1] += remainder
        else:
            sizes.append(remainder)
    return sizes


def pack_sample(sample: samples.Sample) -> bytes:
    """Compresses the canonical JSON of one sample."""
    return zlib.compress(samples.canonical_json(sample).encode("utf-8"), 9)


def unpack_sample(payload: bytes) -> samples.Sample:
    """Inverse of pack_sample."""
    return samples.Sample.from_record(json.loads(zlib.decompress(payload)))


class MatchIndex:
    """Batch/sample maps with per-user batch lists and retention.

    Attributes:
        settings: Matching settings (batch sizes and retention).
        batch_map: Live batches keyed by id.
        sample_map: Compressed sample payloads keyed by sample id.
        refcounts: Number of live batches listing each sample id.
        user_batches: Live batch ids of each user, in serving order.
        expired: Owners of batches removed by retention, keyed by batch id.
    """

    def __init__(self, settings: config.MatchConfig | None = None) -> None:
        """Initializes an empty index.

        Args:
            settings: Matching settings.
        """
        self.settings = settings or config.MatchConfig()
        self.batch_map: Dict[str, BatchRecord] = {}
        self.sample_map: Dict[int, bytes] = {}
        self.refcounts: Dict[int, int] = {}
        self.user_batches: Dict[int, List[str]] = {}
        self.expired: Dict[str, int] = {}
        self._lock = ReadWriteLock()

    def _drop_batch(self, batch_id: str) -> None:
        record = self.batch_map.pop(batch_id)
        self.user_batches[record.user_id].remove(batch_id)
        for sample_id in record.sample_ids:
            self.refcounts[sample_id] -= 1
            if self.refcounts[sample_id] == 0:
                del self.refcounts[sample_id]
                del self.sample_map[sample_id]

    def build_batches(
        self, target: int, matched: Sequence[samples.Sample], day: int
    ) -> List[str]:
        """Registers the matched samples of a user as batches.

        Batches built earlier for the same (user, day) are replaced.

        Args:
            target: Id of the user the samples were matched to.
            matched: Matched samples in serving order.
            day: Matching day.

        Returns:
            The new batch ids in serving order; empty when nothing matched.
        """
        with self._lock.write():
            prefix = f"u{target}-d{day}-"
            for batch_id in list(self.user_batches.get(target, [])):
                if batch_id.startswith(prefix):
                    self._drop_batch(batch_id)
            unique: Dict[int, samples.Sample] = {}
            for sample in matched:
                unique.setdefault(sample.sample_id, sample)
            ordered = list(unique.values())
            sizes = split_sizes(
                len(ordered),
                self.settings.batch_size_default,
                self.settings.batch_size_max,
                self.settings.fragment_threshold,
            )
            batch_ids = []
            start = 0
            for number, size in enumerate(sizes):
                chunk = ordered[start : start + size]
                start += size
                batch_id = f"{prefix}b{number}"
                for sample in chunk:
                    if sample.sample_id not in self.sample_map:
                        self.sample_map[sample.sample_id] = pack_sample(sample)
                    self.refcounts[sample.sample_id] = (
                        self.refcounts.get(sample.sample_id, 0) + 1
                    )
                self.batch_map[batch_id] = BatchRecord(
                    batch_id, target, day, tuple(s.sample_id for s in chunk)
                )
                self.user_batches.setdefault(target, []).append(batch_id)
                batch_ids.append(batch_id)
            return batch_ids

    def list_batches(self, user_id: int) -> List[str]:
        """Live batch ids of a user: newest matching day first, then batch order."""
        with self._lock.read():
            ids = self.user_batches.get(user_id, [])
            return sorted(ids, key=lambda batch_id: -self.batch_map[batch_id].day)

    def query_batch(
        self, user_id: int, batch_id: str, now_day: int | None = None
    ) -> codec.EncodedPayload:
        """Returns the tunnel-encoded payload of one batch.

        Repeated queries return identical payloads.

        Args:
            user_id: Id of the requesting user.
            batch_id: Id of the batch.
            now_day: Current day; batches past retention are reported gone even
                before ``gc_expired`` runs.

        Returns:
            The encoded payload.

        Raises:
            BatchAuthorizationError: If the batch is unknown or owned by another
                user.
            BatchGoneError: If the batch has expired.
        """
        with self._lock.read():
            record = self.batch_map.get(batch_id)
            if record is None:
                if self.expired.get(batch_id) == user_id:
                    raise exceptions.BatchGoneError(f"Batch {batch_id} expired.")
                raise exceptions.BatchAuthorizationError(
                    f"User {user_id} cannot read batch {batch_id}."
                )
            if record.user_id != user_id:
                raise exceptions.BatchAuthorizationError(
                    f"User {user_id} cannot read batch {batch_id}."
                )
            retention = self.settings.retention_days
            if now_day is not None and now_day - record.day > retention:
                raise exceptions.BatchGoneError(f"Batch {batch_id} expired.")
            batch = [unpack_sample(self.sample_map[s]) for s in record.sample_ids]
        return codec.encode_payload(batch)

    def gc_expired(self, now_day: int) -> int:
        """Removes batches older than the retention horizon.

        Args:
            now_day: Current day; batches with age > retention_days go.

        Returns:
            Number of batches removed. Payloads no live batch references are
            removed with them.
        """
        with self._lock.write():
            stale = [
                record
                for record in self.batch_map.values()
                if now_day - record.day > self.settings.retention_days
            ]
            for record in stale:
                self._drop_batch(record.batch_id)
                self.expired[record.batch_id] = record.user_id
        if stale:
            logger.info("Expired %d batches on day %d.", len(stale), now_day)
        return len(stale)

    def payload_bytes(self) -> int:
        """Bytes held by the sample map."""
        with self._lock.read():
            return sum(len(payload) for payload in self.sample_map.values())

    def id_list_bytes(self) -> int:
        """Bytes needed for the sample id lists of every batch."""
        with self._lock.read():
            listed = sum(len(r.sample_ids) for r in self.batch_map.values())
            return _ID_BYTES * listed

    def check_references(self) -> Set[int]:
        """Sample ids referenced by a batch but missing from the sample map."""
        with self._lock.read():
            return {
                sample_id
                for record in self.batch_map.values()
                for sample_id in record.sample_ids
                if sample_id not in self.sample_map
            }

    def save(self, directory: str | Path) -> None:
        """Persists the index as batches.jsonl, samples.bin and samples.idx."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self._lock.read():
            lines = []
            for user_id in sorted(self.user_batches):
                for batch_id in self.user_batches[user_id]:
                    record = self.batch_map[batch_id]
                    lines.append(
                        json.dumps(
                            {
                                "batch_id": record.batch_id,
                                "user_id": record.user_id,
                                "day": record.day,
                                "sample_ids": list(record.sample_ids),
                            },
                            sort_keys=True,
                            separators=(",", ":"),
                        )
                    )
            blob = bytearray()
            index_lines = []
            for sample_id in sorted(self.sample_map):
                payload = self.sample_map[sample_id]
                index_lines.append(f"{sample_id} {len(blob)}")
                blob += struct.pack("<I", len(payload)) + payload
        (directory / BATCHES_FILE).write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )
        (directory / SAMPLES_FILE).write_bytes(bytes(blob))
        (directory / INDEX_FILE).write_text(
            "".join(line + "\n" for line in index_lines), encoding="utf-8"
        )

    @classmethod
    def load(
        cls, directory: str | Path, settings: config.MatchConfig | None = None
    ) -> "MatchIndex":
        """Reads an index written by ``save``."""
        directory = Path(directory)
        index = cls(settings)
        blob = (directory / SAMPLES_FILE).read_bytes()
        index_text = (directory / INDEX_FILE).read_text(encoding="utf-8")
        for line in index_text.splitlines():
            if not line.strip():
                continue
            sample_id, offset = (int(part) for part in line.split())
            (length,) = struct.unpack_from("<I", blob, offset)
            index.sample_map[sample_id] = blob[offset + 4 : offset + 4 + length]
        batches_text = (directory / BATCHES_FILE).read_text(encoding="utf-8")
        for line in batches_text.splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            record = BatchRecord(
                entry["batch_id"],
                entry["user_id"],
                entry["day"],
                tuple(entry["sample_ids"]),
            )
            index.batch_map[record.batch_id] = record
            index.user_batches.setdefault(record.user_id, []).append(record.batch_id)
            for sample_id in record.sample_ids:
                index.refcounts[sample_id] = index.refcounts.get(sample_id, 0) + 1
        return index
