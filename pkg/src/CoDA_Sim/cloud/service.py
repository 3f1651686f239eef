"""Module providing the cloud service of one experiment arm.

The service receives device uploads into a sample warehouse, runs the daily
KNN matching that fills the MatchIndex and answers batch queries for the down
tunnel. ``train_global`` builds the non-personalized model every device starts
from.
"""

import dataclasses
import logging
import threading
from typing import Dict, List, Sequence

import numpy as np

from CoDA_Sim.cloud import match_index, matching
from CoDA_Sim.core import config, exceptions, samples
from CoDA_Sim.mlkit import models, training
from CoDA_Sim.tunnel import codec, uplink

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class MatchingReport:
    """Summary of one day of cloud matching.

    Attributes:
        day: Matching day.
        users: Users that received batches.
        batches: Batches built.
        short: Users matched against fewer than K neighbors.
        expired: Batches removed by retention.
    """

    day: int
    users: int
    batches: int
    short: int
    expired: int


class CloudService:
    """Warehouse, matching and batch serving for one arm.

    Attributes:
        settings: Matching settings.
        index: Deduplicated batch store.
        logs: Up-tunnel log store.
        warehouse: Samples keyed by user id, then by day.
    """

    def __init__(
        self,
        settings: config.MatchConfig,
        index: match_index.MatchIndex | None = None,
        logs: uplink.CloudLogStore | None = None,
        seed: int = 0,
    ) -> None:
        """Initializes an empty service.

        Args:
            settings: Matching settings.
            index: Batch store; a fresh one when omitted.
            logs: Log store; a fresh one when omitted.
            seed: Seed of the coarse quantizer.
        """
        self.settings = settings
        self.index = index or match_index.MatchIndex(settings)
        self.logs = logs or uplink.CloudLogStore()
        self.seed = seed
        self.warehouse: Dict[int, Dict[int, Dict[int, samples.Sample]]] = {}
        self._warehouse_lock = threading.Lock()

    def receive_samples(
        self, device_id: int, day: int, payload: codec.EncodedPayload
    ) -> int:
        """Stores an uploaded batch of raw samples; duplicates are ignored.

        Returns:
            Number of samples newly stored.
        """
        received = codec.decode_payload(payload)
        return self.store_samples(device_id, day, received)

    def store_samples(
        self, device_id: int, day: int, batch: Sequence[samples.Sample]
    ) -> int:
        """Adds samples to the warehouse under (device, day)."""
        stored = 0
        with self._warehouse_lock:
            table = self.warehouse.setdefault(device_id, {}).setdefault(day, {})
            for sample in batch:
                if sample.sample_id not in table:
                    table[sample.sample_id] = sample
                    stored += 1
        return stored

    def gc_warehouse(self, now_day: int) -> int:
        """Drops warehouse days older than the retention horizon."""
        removed = 0
        with self._warehouse_lock:
            for days in self.warehouse.values():
                stale = [d for d in days if now_day - d > self.settings.retention_days]
                for day in stale:
                    removed += len(days.pop(day))
        return removed

    def _recent_samples(self, now_day: int) -> Dict[int, List[samples.Sample]]:
        with self._warehouse_lock:
            return {
                user_id: [
                    sample
                    for day in sorted(days)
                    if day < now_day
                    for sample in days[day].values()
                ]
                for user_id, days in self.warehouse.items()
            }

    def _latest_day_samples(self, now_day: int) -> Dict[int, List[samples.Sample]]:
        latest: Dict[int, List[samples.Sample]] = {}
        with self._warehouse_lock:
            for user_id, days in self.warehouse.items():
                past = [day for day in days if day < now_day and days[day]]
                if past:
                    latest[user_id] = list(days[max(past)].values())
        return latest

    def run_matching(
        self, day: int, users: Sequence[int] | None = None
    ) -> MatchingReport:
        """Matches every user against the population and builds its batches.

        Neighbors contribute the samples of their most recent day before
        ``day``, nearest neighbor first.

        Args:
            day: Matching day.
            users: Target users; every user with a vector when omitted.

        Returns:
            The matching summary.
        """
        expired = self.index.gc_expired(day)
        self.gc_warehouse(day)
        vectors = matching.build_user_vectors(self._recent_samples(day))
        latest = self._latest_day_samples(day)
        if not vectors:
            return MatchingReport(day, 0, 0, 0, expired)
        if self.settings.index == "ivf":
            index: matching.ExactIndex = matching.CoarseIndex(
                vectors, self.settings.n_cells, self.settings.n_search, self.seed
            )
        else:
            index = matching.ExactIndex(vectors)
        targets = sorted(vectors if users is None else set(users) & set(vectors))
        matched_users = batches = short = 0
        for target in targets:
            result = matching.knn_match(target, vectors, self.settings.k, index)
            short += int(result.short)
            matched = matching.matched_samples(result.neighbors, latest)
            if not matched:
                continue
            batches += len(self.index.build_batches(target, matched, day))
            matched_users += 1
        logger.info(
            "Day %d matching: %d users, %d batches, %d short.",
            day,
            matched_users,
            batches,
            short,
        )
        return MatchingReport(day, matched_users, batches, short, expired)

    def list_batches(self, user_id: int) -> List[str]:
        """Live batch ids of a user, in serving order."""
        return self.index.list_batches(user_id)

    def query_batch(
        self, user_id: int, batch_id: str, now_day: int | None = None
    ) -> codec.EncodedPayload:
        """Encoded payload of one batch; see ``MatchIndex.query_batch``."""
        return self.index.query_batch(user_id, batch_id, now_day)


def train_global(
    pooled: Sequence[samples.Sample],
    settings: config.ExperimentConfig,
    seed: int,
) -> models.RecommenderModel:
    """Trains the non-personalized CTR model on pooled samples.

    Args:
        pooled: Samples of every user.
        settings: Experiment settings (model shape and global optimizer).
        seed: Seed of initialization and shuffling.

    Returns:
        The trained model.

    Raises:
        DegenerateDataError: If the samples are empty or hold a single class.
    """
    labels = np.array([sample.label for sample in pooled])
    if labels.size == 0 or labels.min() == labels.max():
        raise exceptions.DegenerateDataError(
            "Global training needs samples of both classes."
        )
    model = training.new_recommender(settings, seed)
    trained, report = training.fit(
        model,
        pooled,
        labels,
        lr=settings.train.global_lr,
        epochs=settings.train.global_epochs,
        batch_size=settings.train.global_batch_size,
        rng=np.random.default_rng([seed, 3]),
    )
    logger.info(
        "Global model: %d samples, %d steps, training AUC %.4f.",
        len(pooled),
        report.steps,
        report.acc,
    )
    return trained
