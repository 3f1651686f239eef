"""Module providing the up tunnel: aggregated device logs and sample upload.

Devices append raw log records locally. Before sending, records sharing
(device, day, event) are merged into one record whose count is the sum of the
member counts and whose id is derived from the member ids, so resending the
same records is recognized by the cloud and never double counted.
"""

import dataclasses
import hashlib
import threading
from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Protocol, Sequence, Tuple

from CoDA_Sim.core import samples
from CoDA_Sim.tunnel import codec

EVENT_TYPES: Tuple[str, ...] = ("exposure", "click", "train", "filter")


@dataclasses.dataclass(frozen=True)
class LogRecord:
    """One up-tunnel log record.

    Attributes:
        record_id: Id used by the cloud to drop duplicates.
        device_id: Reporting device.
        day: Day the events happened on.
        event: One of EVENT_TYPES.
        count: Number of raw events represented.
        stats: Summed numeric payload statistics.
    """

    record_id: str
    device_id: int
    day: int
    event: str
    count: int = 1
    stats: Mapping[str, float] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validates the event type."""
        if self.event not in EVENT_TYPES:
            raise ValueError(f"Unknown event type '{self.event}'.")


def make_record(
    device_id: int,
    day: int,
    event: str,
    sequence: int,
    stats: Mapping[str, float] | None = None,
) -> LogRecord:
    """Creates a raw single-event record with a deterministic id."""
    return LogRecord(
        record_id=f"{device_id}:{day}:{event}:{sequence}",
        device_id=device_id,
        day=day,
        event=event,
        count=1,
        stats=dict(stats or {}),
    )


def aggregate(records: Iterable[LogRecord]) -> List[LogRecord]:
    """Merges records that share (device, day, event).

    Args:
        records: Raw or already aggregated records.

    Returns:
        One record per key, ordered by key.
    """
    groups: Dict[Tuple[int, int, str], List[LogRecord]] = defaultdict(list)
    for record in records:
        groups[(record.device_id, record.day, record.event)].append(record)
    merged = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) == 1:
            merged.append(members[0])
            continue
        digest = hashlib.sha1()
        for record_id in sorted(member.record_id for member in members):
            digest.update(record_id.encode("utf-8") + b"\n")
        stats: Dict[str, float] = defaultdict(float)
        for member in members:
            for name, value in member.stats.items():
                stats[name] += value
        merged.append(
            LogRecord(
                record_id=f"agg:{digest.hexdigest()}",
                device_id=key[0],
                day=key[1],
                event=key[2],
                count=sum(member.count for member in members),
                stats=dict(sorted(stats.items())),
            )
        )
    return merged


@dataclasses.dataclass(frozen=True)
class LogAck:
    """Cloud acknowledgement of a log report.

    Attributes:
        records: Records in the report after aggregation.
        events: Raw events those records represent.
        duplicates: Records already seen and therefore ignored.
    """

    records: int
    events: int
    duplicates: int = 0


class CloudLogStore:
    """Append-only cloud log store with record-id deduplication.

    Attributes:
        counters: Event counts keyed by (device, day, event).
        records: Accepted records in arrival order.
    """

    def __init__(self) -> None:
        """Initializes an empty store."""
        self._lock = threading.Lock()
        self._seen: set[str] = set()
        self.counters: Dict[Tuple[int, int, str], int] = defaultdict(int)
        self.records: List[LogRecord] = []

    def append(self, records: Iterable[LogRecord]) -> LogAck:
        """Stores records not seen before; safe under concurrent callers."""
        records = list(records)
        duplicates = 0
        with self._lock:
            for record in records:
                if record.record_id in self._seen:
                    duplicates += 1
                    continue
                self._seen.add(record.record_id)
                self.records.append(record)
                self.counters[(record.device_id, record.day, record.event)] += (
                    record.count
                )
        return LogAck(
            records=len(records),
            events=sum(record.count for record in records),
            duplicates=duplicates,
        )

    def count(self, event: str, day: int | None = None) -> int:
        """Total events of one type, optionally restricted to a day."""
        with self._lock:
            return sum(
                value
                for (_, record_day, name), value in self.counters.items()
                if name == event and (day is None or record_day == day)
            )


def report_logs(
    store: CloudLogStore, device_id: int, records: Iterable[LogRecord]
) -> LogAck:
    """Aggregates a device's records and sends them to the cloud log store.

    Args:
        store: Cloud log store.
        device_id: Reporting device; records of other devices are rejected.
        records: Records to send.

    Returns:
        The acknowledgement; an empty report acknowledges zero records.
    """
    records = list(records)
    if any(record.device_id != device_id for record in records):
        raise ValueError("A device may only report its own records.")
    return store.append(aggregate(records))


class SampleSink(Protocol):
    """Cloud endpoint receiving raw device samples."""

    def receive_samples(
        self, device_id: int, day: int, payload: codec.EncodedPayload
    ) -> int:
        """Stores uploaded samples and returns how many were accepted."""


def upload_samples(
    sink: SampleSink, device_id: int, day: int, batch: Sequence[samples.Sample]
) -> int:
    """Sends a device's new samples to the cloud over the up tunnel.

    Samples travel in the same encoded form as down-tunnel batches.

    Args:
        sink: Cloud endpoint.
        device_id: Uploading device.
        day: Day the samples were generated on.
        batch: The samples; an empty batch is not sent.

    Returns:
        Number of samples the cloud accepted.
    """
    if not batch:
        return 0
    if any(sample.user_id != device_id for sample in batch):
        raise ValueError("A device may only upload its own samples.")
    return sink.receive_samples(device_id, day, codec.encode_payload(batch))
