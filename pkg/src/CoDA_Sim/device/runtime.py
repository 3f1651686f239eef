"""Module providing the per-device driver of one experiment arm.

A device's day, in order: lifecycle GC, the arm-specific learning work, serving
the day's exposures, then storing the served samples as new local samples.

Learning work per arm:

- cloud: none; the global model is served unchanged.
- local: one validation-gated training pass on local samples only.
- coda: pull batches until the quota or the cloud runs out; every batch runs
  the filtering task and recommender training triggers once enough samples
  have been kept since the last training, and again when pulling ends.
"""

import dataclasses
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np

from CoDA_Sim.core import config, exceptions, samples, synthdata
from CoDA_Sim.device import learning, model_store, store
from CoDA_Sim.mlkit import models, training
from CoDA_Sim.tunnel import inlet, uplink

logger = logging.getLogger(__name__)

ARM_CLOUD = "cloud"
ARM_LOCAL = "local"
ARM_CODA = "coda"

RECOMMENDER_DIR = "recommender"
CLASSIFIER_DIR = "classifier"
SAMPLES_DIR = "samples"


@dataclasses.dataclass(frozen=True)
class TaskEvent:
    """A notable device task outcome, written to events.ldjson.

    Attributes:
        arm: Experiment arm.
        day: Day of the event.
        device_id: Device the event happened on.
        kind: Event kind, e.g. "commit", "rollback", "classifier_skipped".
        detail: Extra JSON-ready fields.
    """

    arm: str
    day: int
    device_id: int
    kind: str
    detail: Dict[str, Any] = dataclasses.field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        """JSON-ready representation."""
        return {
            "arm": self.arm,
            "day": self.day,
            "detail": dict(self.detail),
            "device_id": self.device_id,
            "event": self.kind,
        }


@dataclasses.dataclass
class DeviceDayStats:
    """Counters of one device-day.

    Attributes:
        pulls: Batches pulled.
        payload_chars: Encoded characters downloaded.
        raw_bytes: Uncompressed bytes those payloads carried.
        kept: Matched samples kept by the filter.
        discarded: Matched samples discarded by the filter.
        trainings: Recommender training calls.
        commits: Training calls that committed.
        task_seconds: Wall time of the learning work.
    """

    pulls: int = 0
    payload_chars: int = 0
    raw_bytes: int = 0
    kept: int = 0
    discarded: int = 0
    trainings: int = 0
    commits: int = 0
    task_seconds: float = 0.0


@dataclasses.dataclass(frozen=True)
class ServedDay:
    """Exposures served on one device-day.

    Attributes:
        served: Labeled samples recording the served animation.
        stats: Counters of the day.
    """

    served: List[samples.Sample]
    stats: DeviceDayStats


def choose_animations(
    model: models.Model,
    exposures: Sequence[synthdata.Exposure],
    explore_rate: float,
) -> List[int]:
    """Serving policy: argmax predicted CTR, uniform with prob. explore_rate.

    Ties go to the lowest animation index.
    """
    if not exposures:
        return []
    n_animations = len(config.ANIMATIONS)
    variants = [
        dataclasses.replace(exposure.context, animation=animation)
        for exposure in exposures
        for animation in config.ANIMATIONS
    ]
    scores = model.predict(variants).reshape(len(exposures), n_animations)
    best = np.argmax(scores, axis=1)
    return [
        exposure.explore_animation
        if exposure.explore_draw < explore_rate
        else int(best[row])
        for row, exposure in enumerate(exposures)
    ]


class DeviceRuntime:
    """State and daily work of one device in one arm.

    Attributes:
        device_id: Id of the device, equal to its user id.
        arm: ARM_CLOUD, ARM_LOCAL or ARM_CODA.
        settings: Experiment settings.
        store: Sample tables.
        model_store: Serving model slots.
        classifier_store: Sample classifier slots, warm-started across batches.
        state_dir: Directory the device state is kept in, or None.
        inlet: Down-tunnel inlet; only the coda arm has one.
        events: Task events not yet collected.
        logs: Up-tunnel log records not yet reported.
    """

    def __init__(
        self,
        device_id: int,
        arm: str,
        settings: config.ExperimentConfig,
        global_model: models.Model,
        batch_inlet: inlet.BatchInlet | None = None,
        state_dir: str | Path | None = None,
    ) -> None:
        """Initializes the device with the global model.

        Args:
            device_id: Id of the device.
            arm: Experiment arm.
            settings: Experiment settings.
            global_model: Model every device starts from.
            batch_inlet: Down-tunnel inlet, required for the coda arm.
            state_dir: Directory backing both model stores and the sample
                tables; None keeps everything in memory.
        """
        self._bind(device_id, arm, settings, batch_inlet, state_dir)
        self.store = store.DeviceStore(settings.device)
        self.model_store = model_store.ModelStore(self._state_path(RECOMMENDER_DIR))
        self.model_store.initialize(global_model)
        self.classifier_store = model_store.ModelStore(
            self._state_path(CLASSIFIER_DIR)
        )
        self.classifier_store.initialize(
            training.new_classifier(settings, seed=settings.seed * 100_003 + device_id)
        )

    @classmethod
    def restore(
        cls,
        device_id: int,
        arm: str,
        settings: config.ExperimentConfig,
        state_dir: str | Path,
        batch_inlet: inlet.BatchInlet | None = None,
    ) -> "DeviceRuntime":
        """Reopens a device from its state directory.

        Interrupted commits of either model store are repaired on the way.

        Args:
            device_id: Id of the device.
            arm: Experiment arm.
            settings: Experiment settings.
            state_dir: Directory written by an earlier runtime.
            batch_inlet: Down-tunnel inlet, required for the coda arm.

        Returns:
            The device, without pending events or log records.

        Raises:
            ModelStoreUninitializedError: If a model store holds no model.
        """
        device = cls.__new__(cls)
        device._bind(device_id, arm, settings, batch_inlet, state_dir)
        samples_dir = Path(state_dir) / SAMPLES_DIR
        device.store = (
            store.DeviceStore.load(samples_dir, settings.device)
            if samples_dir.is_dir()
            else store.DeviceStore(settings.device)
        )
        device.model_store = model_store.ModelStore.open(
            Path(state_dir) / RECOMMENDER_DIR
        )
        device.classifier_store = model_store.ModelStore.open(
            Path(state_dir) / CLASSIFIER_DIR
        )
        for slots in (device.model_store, device.classifier_store):
            if not slots.initialized:
                raise exceptions.ModelStoreUninitializedError(
                    f"No model saved in {slots.directory}."
                )
        return device

    def _bind(
        self,
        device_id: int,
        arm: str,
        settings: config.ExperimentConfig,
        batch_inlet: inlet.BatchInlet | None,
        state_dir: str | Path | None,
    ) -> None:
        if arm not in config.ARMS:
            raise ValueError(f"Unknown arm '{arm}'.")
        if arm == ARM_CODA and batch_inlet is None:
            raise ValueError("The coda arm needs a batch inlet.")
        self.device_id = device_id
        self.arm = arm
        self.settings = settings
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.inlet = batch_inlet
        self.events: List[TaskEvent] = []
        self.logs: List[uplink.LogRecord] = []
        self._rng = np.random.default_rng([settings.seed, 4, device_id])
        self._log_sequence = 0
        self._fresh_augmented = 0

    def _state_path(self, name: str) -> Path | None:
        return self.state_dir / name if self.state_dir is not None else None

    @property
    def classifier(self) -> models.ClassifierModel:
        """The committed sample classifier."""
        model = self.classifier_store.serving_model()
        assert isinstance(model, models.ClassifierModel)
        return model

    @property
    def classifier_trained(self) -> bool:
        """Whether a classifier update has been committed."""
        return self.classifier_store.slot_bytes(
            model_store.SERVING
        ) != self.classifier_store.slot_bytes(model_store.BACKUP)

    def save_state(self) -> None:
        """Writes the sample tables next to the model stores.

        Raises:
            ValueError: If the device has no state directory.
        """
        if self.state_dir is None:
            raise ValueError("Device has no state directory.")
        self.store.save(self.state_dir / SAMPLES_DIR)

    def _event(self, day: int, kind: str, **detail: Any) -> None:
        self.events.append(TaskEvent(self.arm, day, self.device_id, kind, detail))

    def _log(self, day: int, event: str, **stats: float) -> None:
        self._log_sequence += 1
        self.logs.append(
            uplink.make_record(self.device_id, day, event, self._log_sequence, stats)
        )

    def _update_classifier(
        self, pending: Sequence[samples.Sample], day: int
    ) -> learning.ClassifierOutcome:
        candidate = self.classifier_store.begin_training()
        assert isinstance(candidate, models.ClassifierModel)
        try:
            outcome = learning.train_sample_classifier(
                candidate,
                self.store.local_samples(),
                pending,
                self.settings,
                self._rng,
            )
        except Exception:
            self.classifier_store.rollback()
            raise
        if outcome.skipped:
            self.classifier_store.rollback()
            self._event(day, "classifier_skipped", outside=len(outcome.train_part))
        else:
            self.classifier_store.update_buffer(outcome.classifier)
            self.classifier_store.commit()
        return outcome

    def run_filtering_task(
        self, batch: Sequence[samples.Sample], day: int, stats: DeviceDayStats
    ) -> None:
        """Classifier update on a third of a batch, filtering of the rest."""
        self.store.ingest_matched_batch(batch, day)
        outcome = self._update_classifier(self.store.take_pending(), day)
        if not self.classifier_trained:
            stats.discarded += len(outcome.filter_part)
            return
        result = learning.filter_and_augment(
            self.classifier,
            outcome.filter_part,
            self.settings.filter.sigma,
            self.store,
            day,
        )
        stats.kept += len(result.kept)
        stats.discarded += result.discarded
        self._fresh_augmented += len(result.kept)
        self._log(day, "filter", kept=len(result.kept), discarded=result.discarded)

    def train(self, day: int, stats: DeviceDayStats, reason: str) -> None:
        """Runs validation-gated recommender training and records the outcome."""
        self._fresh_augmented = 0
        outcome = learning.train_recommender(
            self.store,
            self.model_store,
            self.settings,
            day,
            self._rng,
            use_augmented=self.arm == ARM_CODA,
        )
        if outcome.status == learning.STATUS_NO_SAMPLES:
            return
        stats.trainings += 1
        if outcome.status == learning.STATUS_ABORTED:
            self._event(day, "training_aborted", reason="degenerate_validation")
            return
        stats.commits += int(outcome.decision == "commit")
        self._event(
            day,
            outcome.decision or "rollback",
            reason=reason,
            steps=outcome.report.steps,
            accepted=len(outcome.accepted),
            initial_auc=round(outcome.initial_acc, 6),
            final_auc=round(outcome.report.acc, 6),
        )
        self._log(day, "train", steps=outcome.report.steps)

    def _pull(self, day: int) -> inlet.PullResult | None:
        assert self.inlet is not None
        for attempt in range(self.settings.tunnel.max_retries + 1):
            try:
                return self.inlet.pull_next_batch(day)
            except exceptions.TransportError as err:
                logger.debug(
                    "Device %d pull attempt %d: %s", self.device_id, attempt, err
                )
        self._event(day, "transport_failed", retries=self.settings.tunnel.max_retries)
        return None

    def pull_and_learn(self, day: int, stats: DeviceDayStats) -> None:
        """Pulls batches until pulling ends, running the tasks each one triggers."""
        while True:
            result = self._pull(day)
            if result is None or result.terminal:
                if result is not None:
                    self._event(day, result.status, pulls=stats.pulls)
                self.train(day, stats, reason="pulls_ended")
                return
            stats.pulls += 1
            stats.payload_chars += result.payload_chars
            stats.raw_bytes += result.raw_bytes
            self.run_filtering_task(result.samples, day, stats)
            if self._fresh_augmented >= self.settings.device.train_trigger:
                self.train(day, stats, reason="trigger")

    def learn(self, day: int) -> DeviceDayStats:
        """Lifecycle GC followed by the arm's learning work."""
        stats = DeviceDayStats()
        started = time.perf_counter()
        self.store.run_lifecycle_gc(day)
        if self.arm == ARM_LOCAL:
            self.train(day, stats, reason="daily")
        elif self.arm == ARM_CODA:
            self.pull_and_learn(day, stats)
        stats.task_seconds = time.perf_counter() - started
        return stats

    def serve(
        self,
        day: int,
        exposures: Sequence[synthdata.Exposure],
        population: synthdata.Population,
    ) -> List[samples.Sample]:
        """Serves exposures with the routed model and draws the clicks."""
        model = self.model_store.serving_model()
        animations = choose_animations(
            model, exposures, self.settings.serve.explore_rate
        )
        served = [
            population.label(exposure, animation)
            for exposure, animation in zip(exposures, animations)
        ]
        for sample in served:
            self._log(day, "exposure")
            if sample.label:
                self._log(day, "click")
        return served

    def run_day(
        self,
        day: int,
        exposures: Sequence[synthdata.Exposure],
        population: synthdata.Population,
    ) -> ServedDay:
        """One full device-day; served samples become local samples.

        A device with a state directory saves its sample tables at the end.
        """
        stats = self.learn(day)
        served = self.serve(day, exposures, population)
        self.store.add_local(served)
        if self.state_dir is not None:
            self.save_state()
        return ServedDay(served, stats)

    def heldout_auc(self, eval_samples: Sequence[samples.Sample]) -> float | None:
        """AUC of the serving model on held-out samples, None if single-class."""
        labels = np.array([s.label for s in eval_samples])
        if labels.size == 0 or labels.min() == labels.max():
            return None
        scores = self.model_store.serving_model().predict(eval_samples)
        return training.score_metric(scores, labels)

    def drain_events(self) -> List[TaskEvent]:
        """Returns and clears the collected task events."""
        events, self.events = self.events, []
        return events

    def flush_logs(self, log_store: uplink.CloudLogStore) -> uplink.LogAck:
        """Reports buffered log records over the up tunnel."""
        ack = uplink.report_logs(log_store, self.device_id, self.logs)
        self.logs = []
        return ack
