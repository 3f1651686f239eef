"""Module providing the lifecycle-managed on-device sample tables.

The local table holds the device's own samples; the outside table holds
matched samples waiting to be filtered (pending), filtered samples kept for
training (augmented) and augmented samples already trained on (consumed, removed
by the next lifecycle pass). Both tables are capped. Inserting into a full table
first forces a cleanup down to half the limit: the outside table drops its
lowest-scored entries (unscored entries count as 0), the local table its
earliest-generated ones; ties go to the earlier insertion.

Local samples change role with age (now_day - generation day):

- age <= t: classifier training and validation
- t < age <= t': classifier training and recommender training
- age > t': removed by ``run_lifecycle_gc``
"""

import dataclasses
import json
import math
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Sequence

from CoDA_Sim.core import config, samples

ORIGIN_LOCAL = "local"
ORIGIN_OUTSIDE = "outside"
STATE_PENDING = "pending"
STATE_AUGMENTED = "augmented"
STATE_CONSUMED = "consumed"

ROLE_CLASSIFIER = "classifier-train"
ROLE_RECOMMENDER = "recommender-train"
ROLE_VALIDATION = "validation"


@dataclasses.dataclass
class StoredSample:
    """One table entry.

    Attributes:
        sample: The stored sample.
        day: Generation day (local) or arrival day (outside).
        seq: Insertion sequence number, unique per store.
        origin: ORIGIN_LOCAL or ORIGIN_OUTSIDE.
        score: Classifier score; None until scored.
        state: STATE_PENDING, STATE_AUGMENTED or STATE_CONSUMED for outside
            entries.
    """

    sample: samples.Sample
    day: int
    seq: int
    origin: str
    score: float | None = None
    state: str = STATE_PENDING

    @property
    def effective_score(self) -> float:
        """Score used for eviction; unscored entries count as 0."""
        return 0.0 if self.score is None else self.score

    def to_record(self) -> dict:
        """JSON-ready representation used by ``DeviceStore.save``."""
        return {
            "day": self.day,
            "origin": self.origin,
            "sample": self.sample.to_record(),
            "score": self.score,
            "seq": self.seq,
            "state": self.state,
        }


@dataclasses.dataclass(frozen=True)
class IngestCounts:
    """Result of an insertion.

    Attributes:
        stored: Entries inserted.
        evicted: Entries removed by forced cleanups.
    """

    stored: int
    evicted: int


@dataclasses.dataclass(frozen=True)
class GcCounts:
    """Result of a lifecycle pass.

    Attributes:
        local: Local samples removed for age.
        outside: Consumed outside samples removed.
    """

    local: int
    outside: int


@dataclasses.dataclass(frozen=True)
class AugmentedDataset:
    """Role-tagged view of local and augmented samples on one day.

    Attributes:
        classifier_train: Local samples labeled 1 for the classifier.
        recommender_train: Older local samples followed by augmented ones.
        validation: Recent local samples only.
        augmented: The augmented samples inside recommender_train.
    """

    classifier_train: List[samples.Sample]
    recommender_train: List[samples.Sample]
    validation: List[samples.Sample]
    augmented: List[samples.Sample]


class DeviceStore:
    """Local and outside sample tables with size limits and age policy.

    Attributes:
        settings: Device settings (limits, t, t').
        local: Local entries keyed by sample id, in insertion order.
        outside: Outside entries keyed by sample id, in insertion order.
    """

    def __init__(self, settings: config.DeviceConfig | None = None) -> None:
        """Initializes empty tables.

        Args:
            settings: Device settings.
        """
        self.settings = settings or config.DeviceConfig()
        self.local: Dict[int, StoredSample] = {}
        self.outside: Dict[int, StoredSample] = {}
        self._seq = 0

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    @staticmethod
    def _cleanup(table: Dict[int, StoredSample], limit: int, outside: bool) -> int:
        """Removes entries until the table holds ceil(limit / 2)."""
        target = math.ceil(limit / 2)
        excess = len(table) - target
        if excess <= 0:
            return 0
        if outside:
            order = sorted(table.values(), key=lambda e: (e.effective_score, e.seq))
        else:
            order = sorted(table.values(), key=lambda e: (e.day, e.seq))
        for entry in order[:excess]:
            del table[entry.sample.sample_id]
        return excess

    def _insert(
        self,
        table: Dict[int, StoredSample],
        limit: int,
        entry: StoredSample,
        outside: bool,
    ) -> int:
        evicted = 0
        table.pop(entry.sample.sample_id, None)
        if len(table) >= limit:
            evicted = self._cleanup(table, limit, outside)
        table[entry.sample.sample_id] = entry
        return evicted

    def add_local(self, new_samples: Iterable[samples.Sample]) -> IngestCounts:
        """Stores the device's own samples under their generation day."""
        stored = evicted = 0
        for sample in new_samples:
            entry = StoredSample(sample, sample.day, self._next_seq(), ORIGIN_LOCAL)
            evicted += self._insert(self.local, self.settings.local_limit, entry, False)
            stored += 1
        return IngestCounts(stored, evicted)

    def ingest_matched_batch(
        self,
        batch: Sequence[samples.Sample],
        day: int = 0,
        scores: Sequence[float] | None = None,
    ) -> IngestCounts:
        """Inserts matched samples into the outside table.

        Without scores the samples are pending (unscored, evicted as score 0).
        With scores they are filtered samples kept for recommender training.

        Args:
            batch: Samples decoded from the tunnel.
            day: Arrival day.
            scores: Classifier scores, one per sample.

        Returns:
            Counts of stored and evicted entries.
        """
        if scores is not None and len(scores) != len(batch):
            raise ValueError("Need exactly one score per sample.")
        stored = evicted = 0
        for position, sample in enumerate(batch):
            score = None if scores is None else float(scores[position])
            entry = StoredSample(
                sample,
                day,
                self._next_seq(),
                ORIGIN_OUTSIDE,
                score=score,
                state=STATE_PENDING if score is None else STATE_AUGMENTED,
            )
            evicted += self._insert(
                self.outside, self.settings.outside_limit, entry, True
            )
            stored += 1
        return IngestCounts(stored, evicted)

    def take_pending(self) -> List[samples.Sample]:
        """Removes and returns the pending matched samples, oldest first."""
        pending = [e for e in self.outside.values() if e.state == STATE_PENDING]
        for entry in pending:
            del self.outside[entry.sample.sample_id]
        return [entry.sample for entry in pending]

    def augmented(self) -> List[samples.Sample]:
        """Filtered outside samples, in insertion order."""
        return [
            e.sample for e in self.outside.values() if e.state == STATE_AUGMENTED
        ]

    def mark_consumed(self, sample_ids: Iterable[int]) -> int:
        """Retires augmented samples used by training; the next GC removes them.

        Consumed samples leave ``augmented()`` at once. Unknown ids and samples
        that are not augmented are ignored.

        Returns:
            Number of samples retired.
        """
        retired = 0
        for sample_id in sample_ids:
            entry = self.outside.get(sample_id)
            if entry is not None and entry.state == STATE_AUGMENTED:
                entry.state = STATE_CONSUMED
                retired += 1
        return retired

    def roles(self, entry: StoredSample, now_day: int) -> FrozenSet[str]:
        """Roles of a local entry on a given day."""
        age = now_day - entry.day
        if age <= self.settings.t:
            return frozenset({ROLE_CLASSIFIER, ROLE_VALIDATION})
        if age <= self.settings.t_prime:
            return frozenset({ROLE_CLASSIFIER, ROLE_RECOMMENDER})
        return frozenset()

    def local_samples(self) -> List[samples.Sample]:
        """All local samples, in insertion order."""
        return [entry.sample for entry in self.local.values()]

    def _with_role(self, role: str, now_day: int) -> List[samples.Sample]:
        return [
            entry.sample
            for entry in self.local.values()
            if role in self.roles(entry, now_day)
        ]

    def validation_set(self, now_day: int) -> List[samples.Sample]:
        """Local samples aged [0, t]."""
        return self._with_role(ROLE_VALIDATION, now_day)

    def local_train_set(self, now_day: int) -> List[samples.Sample]:
        """Local samples aged (t, t']."""
        return self._with_role(ROLE_RECOMMENDER, now_day)

    def augmented_view(
        self, now_day: int, use_augmented: bool = True
    ) -> AugmentedDataset:
        """Role-tagged view of both tables.

        Args:
            now_day: Current day.
            use_augmented: False leaves filtered outside samples out.

        Returns:
            The training and validation sets of the day.
        """
        augmented = self.augmented() if use_augmented else []
        return AugmentedDataset(
            classifier_train=self._with_role(ROLE_CLASSIFIER, now_day),
            recommender_train=self.local_train_set(now_day) + augmented,
            validation=self.validation_set(now_day),
            augmented=augmented,
        )

    def run_lifecycle_gc(self, now_day: int) -> GcCounts:
        """Removes aged local samples and consumed outside samples.

        Args:
            now_day: Current day.

        Returns:
            Removal counts per table.
        """
        stale = [
            sample_id
            for sample_id, entry in self.local.items()
            if now_day - entry.day > self.settings.t_prime
        ]
        for sample_id in stale:
            del self.local[sample_id]
        consumed = [
            sample_id
            for sample_id, entry in self.outside.items()
            if entry.state == STATE_CONSUMED
        ]
        for sample_id in consumed:
            del self.outside[sample_id]
        return GcCounts(len(stale), len(consumed))

    def save(self, directory: str | Path) -> None:
        """Writes both tables as LDJSON files."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, table in (("local", self.local), ("outside", self.outside)):
            lines = [
                json.dumps(entry.to_record(), sort_keys=True, separators=(",", ":"))
                for entry in table.values()
            ]
            (directory / f"{name}.ldjson").write_text(
                "".join(line + "\n" for line in lines), encoding="utf-8"
            )

    @classmethod
    def load(
        cls, directory: str | Path, settings: config.DeviceConfig | None = None
    ) -> "DeviceStore":
        """Reads tables written by ``save``."""
        store = cls(settings)
        directory = Path(directory)
        for name, table in (("local", store.local), ("outside", store.outside)):
            text = (directory / f"{name}.ldjson").read_text(encoding="utf-8")
            for line in text.splitlines():
                if not line:
                    continue
                record = json.loads(line)
                entry = StoredSample(
                    sample=samples.Sample.from_record(record["sample"]),
                    day=record["day"],
                    seq=record["seq"],
                    origin=record["origin"],
                    score=record["score"],
                    state=record["state"],
                )
                table[entry.sample.sample_id] = entry
                store._seq = max(store._seq, entry.seq)
        return store
