"""Module providing the ExperimentPresenter class for CoDA-Sim.

The presenter owns the simulated world (population, one cloud service and one
device population per arm), drives the daily work cycle and pushes progress,
per-device errors and the final report into a view.
"""

import concurrent.futures
import dataclasses
import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence

from CoDA_Sim.cloud import service
from CoDA_Sim.core import config, exceptions, metrics, samples, synthdata
from CoDA_Sim.device import runtime
from CoDA_Sim.mlkit import models, training
from CoDA_Sim.tunnel import inlet, uplink
from CoDA_Sim.views import interfaces

logger = logging.getLogger(__name__)

EFFICIENCY_FIELDS = (
    "pulls",
    "payload_chars",
    "raw_bytes",
    "kept",
    "discarded",
    "trainings",
    "commits",
)

INDEX_DIR = "index"


@dataclasses.dataclass
class ArmState:
    """Everything one arm owns.

    Attributes:
        name: Arm name.
        cloud: The arm's cloud service.
        tunnel: Down tunnel over the cloud's batches.
        devices: Device drivers keyed by device id.
        efficiency: Summed DeviceDayStats counters.
        task_seconds: Summed learning wall time.
        device_days: Device-days completed without error.
        errors: Device-days aborted by an error.
    """

    name: str
    cloud: service.CloudService
    tunnel: inlet.DownTunnel
    devices: Dict[int, runtime.DeviceRuntime]
    efficiency: Dict[str, int] = dataclasses.field(
        default_factory=lambda: {name: 0 for name in EFFICIENCY_FIELDS}
    )
    task_seconds: float = 0.0
    device_days: int = 0
    errors: int = 0


@dataclasses.dataclass
class ExperimentResult:
    """Everything a view needs to report a run.

    Attributes:
        settings: Resolved configuration.
        report: Metrics of every arm.
        events: Task and exposure events as JSON-ready records.
        efficiency: Per-arm download and filtering counters.
        timings: Per-arm learning wall time.
    """

    settings: config.ExperimentConfig
    report: metrics.MetricsReport
    events: List[dict]
    efficiency: Dict[str, Dict[str, float]]
    timings: Dict[str, Dict[str, float]]


class ExperimentPresenter:
    """Presenter running an A/B experiment and reporting it to a view.

    Attributes:
        settings: Experiment settings.
        view: View receiving progress, errors and the result.
        population: The synthetic population shared by every arm.
        first_day: First experiment day; earlier days are warm-up history.
        global_model: Model every device starts from.
        arms: Arm states keyed by arm name.
        exposure_events: Served exposures of every arm.
        events: Task events as JSON-ready records.
        state_dir: Directory receiving the device states and the batch index
            of the coda arm, or None.
    """

    def __init__(
        self,
        settings: config.ExperimentConfig,
        view: interfaces.IReportView | None = None,
        state_dir: str | Path | None = None,
    ) -> None:
        """Builds the population, the warm-up history and the arms.

        Args:
            settings: Experiment settings.
            view: View receiving progress and the result.
            state_dir: Directory the run state is kept in; None keeps it in
                memory.
        """
        self.settings = settings
        self.view = view
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.population = synthdata.population_from_config(
            settings.population, settings.seed
        )
        self.first_day = settings.warmup_days
        self.exposure_events: List[metrics.ExposureEvent] = []
        self.events: List[dict] = []
        self.arms: Dict[str, ArmState] = {}
        history = self._warmup_history()
        self.global_model = self._train_global(history)
        for arm in settings.arms:
            self.arms[arm] = self._build_arm(arm, history)

    def _progress(self, message: str) -> None:
        logger.info(message)
        if self.view is not None:
            self.view.show_progress(message)

    def _error(self, message: str) -> None:
        logger.warning(message)
        if self.view is not None:
            self.view.display_error(message)

    def _warmup_history(self) -> Dict[int, Dict[int, List[samples.Sample]]]:
        """Per-user, per-day history generated before the experiment."""
        settings = self.settings
        history: Dict[int, Dict[int, List[samples.Sample]]] = {}
        if settings.warmup_days == 0 or settings.initial_local_samples == 0:
            return history
        per_day = math.ceil(settings.initial_local_samples / settings.warmup_days)
        for user in self.population.users:
            history[user.user_id] = {
                day: self.population.gen_day(user.user_id, day, per_day)
                for day in range(settings.warmup_days)
            }
        return history

    def _train_global(
        self, history: Dict[int, Dict[int, List[samples.Sample]]]
    ) -> models.Model:
        pooled = [
            sample
            for days in history.values()
            for day_samples in days.values()
            for sample in day_samples
        ]
        try:
            return service.train_global(pooled, self.settings, self.settings.seed)
        except exceptions.DegenerateDataError as err:
            logger.warning("Serving an untrained global model: %s", err)
            return training.new_recommender(self.settings, self.settings.seed)

    def device_state_dir(self, arm: str, device_id: int) -> Path | None:
        """State directory of one device, None when the run keeps no state."""
        if self.state_dir is None:
            return None
        return self.state_dir / arm / f"device-{device_id}"

    def save_index(self) -> Path | None:
        """Writes the coda arm's batch index for ``coda-sim serve``.

        Returns:
            The index directory, None without a state directory or coda arm.
        """
        coda = self.arms.get(runtime.ARM_CODA)
        if self.state_dir is None or coda is None:
            return None
        directory = self.state_dir / INDEX_DIR
        coda.cloud.index.save(directory)
        self._progress(
            f"Saved {len(coda.cloud.index.batch_map)} batches to {directory}."
        )
        return directory

    def _build_arm(
        self, arm: str, history: Dict[int, Dict[int, List[samples.Sample]]]
    ) -> ArmState:
        cloud = service.CloudService(
            self.settings.cloud, seed=self.settings.seed
        )
        tunnel = inlet.DownTunnel(cloud, self.settings.tunnel, self.settings.seed)
        devices = {}
        for user in self.population.users:
            batch_inlet = None
            if arm == runtime.ARM_CODA:
                batch_inlet = tunnel.register(user.user_id)
            device = runtime.DeviceRuntime(
                user.user_id,
                arm,
                self.settings,
                self.global_model,
                batch_inlet,
                self.device_state_dir(arm, user.user_id),
            )
            for day, day_samples in sorted(history.get(user.user_id, {}).items()):
                device.store.add_local(day_samples)
                if arm == runtime.ARM_CODA:
                    cloud.store_samples(user.user_id, day, day_samples)
            if device.state_dir is not None:
                device.save_state()
            devices[user.user_id] = device
        return ArmState(arm, cloud, tunnel, devices)

    def _run_device(
        self,
        arm: ArmState,
        device: runtime.DeviceRuntime,
        day: int,
        exposures: Sequence[synthdata.Exposure],
    ) -> runtime.ServedDay | None:
        """Runs one device-day; an error aborts only this device-day."""
        try:
            return device.run_day(day, exposures, self.population)
        except exceptions.NonFiniteGradientError as e:
            message = f"training diverged in layer '{e.layer}'"
        except exceptions.PayloadCorruptionError as e:
            message = f"corrupted batch: {e}"
        except exceptions.PayloadParseError as e:
            message = f"unreadable batch: {e}"
        except exceptions.CoDAError as e:
            message = str(e)
        except Exception as e:
            message = f"Unexpected error: {str(e)}"
        for slots in (device.model_store, device.classifier_store):
            if slots.in_transaction:
                slots.rollback()
        device.events.append(
            runtime.TaskEvent(
                arm.name, day, device.device_id, "device_error", {"error": message}
            )
        )
        self._error(f"[{arm.name}] device {device.device_id} day {day}: {message}")
        return None

    def run_work_cycle(
        self,
        arm: ArmState,
        day: int,
        exposures: Dict[int, List[synthdata.Exposure]],
    ) -> List[metrics.ExposureEvent]:
        """Runs one day of an arm: matching, every device, then the up tunnel.

        Args:
            arm: The arm to advance.
            day: Day to run.
            exposures: The day's exposures keyed by user id.

        Returns:
            The exposures served that day.
        """
        if arm.name == runtime.ARM_CODA:
            arm.cloud.run_matching(day)
            for device_id, device in arm.devices.items():
                if device.inlet is not None:
                    device.inlet.forget(set(arm.cloud.list_batches(device_id)))
        device_ids = sorted(arm.devices)
        jobs = self.settings.jobs
        if jobs > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = [
                    pool.submit(
                        self._run_device,
                        arm,
                        arm.devices[device_id],
                        day,
                        exposures[device_id],
                    )
                    for device_id in device_ids
                ]
                results = [future.result() for future in futures]
        else:
            results = [
                self._run_device(arm, arm.devices[i], day, exposures[i])
                for i in device_ids
            ]
        served_events: List[metrics.ExposureEvent] = []
        for device_id, result in zip(device_ids, results):
            device = arm.devices[device_id]
            self.events.extend(event.to_record() for event in device.drain_events())
            device.flush_logs(arm.cloud.logs)
            if result is None:
                arm.errors += 1
                continue
            arm.device_days += 1
            arm.task_seconds += result.stats.task_seconds
            for name in EFFICIENCY_FIELDS:
                arm.efficiency[name] += getattr(result.stats, name)
            if arm.name == runtime.ARM_CODA:
                uplink.upload_samples(arm.cloud, device_id, day, result.served)
            served_events.extend(
                metrics.ExposureEvent(arm.name, day, device_id, sample.label)
                for sample in result.served
            )
        return served_events

    def _heldout(self, report: metrics.MetricsReport) -> None:
        eval_day = self.first_day + self.settings.days
        n_eval = self.settings.serve.eval_samples
        if n_eval < 1:
            return
        for user in self.population.users:
            eval_samples = self.population.gen_day(
                user.user_id, eval_day, n_eval, synthdata.STREAM_EVAL
            )
            for name, arm in self.arms.items():
                value = arm.devices[user.user_id].heldout_auc(eval_samples)
                if value is not None:
                    report.heldout_auc.setdefault(name, {})[user.user_id] = value

    def efficiency(self) -> Dict[str, Dict[str, float]]:
        """Per-arm download and filtering counters, with the compression ratio."""
        table: Dict[str, Dict[str, float]] = {}
        for name, arm in self.arms.items():
            row: Dict[str, float] = dict(arm.efficiency)
            row["device_days"] = arm.device_days
            row["device_errors"] = arm.errors
            raw = arm.efficiency["raw_bytes"]
            row["compression_ratio"] = (
                arm.efficiency["payload_chars"] / raw if raw else 0.0
            )
            pulls = arm.efficiency["pulls"]
            row["mean_payload_chars"] = (
                arm.efficiency["payload_chars"] / pulls if pulls else 0.0
            )
            table[name] = row
        return table

    def timings(self) -> Dict[str, Dict[str, float]]:
        """Per-arm learning wall time."""
        return {
            name: {
                "task_seconds": arm.task_seconds,
                "mean_task_seconds": (
                    arm.task_seconds / arm.device_days if arm.device_days else 0.0
                ),
            }
            for name, arm in self.arms.items()
        }

    def run_ab_experiment(self) -> ExperimentResult:
        """Runs every arm over identical exposure streams and reports the result.

        Returns:
            The experiment result, also written to the view.
        """
        settings = self.settings
        for offset in range(settings.days):
            day = self.first_day + offset
            exposures = {
                user.user_id: self.population.gen_exposures(
                    user.user_id, day, settings.serve.exposures_per_day
                )
                for user in self.population.users
            }
            for arm in self.arms.values():
                self.exposure_events.extend(self.run_work_cycle(arm, day, exposures))
            self._progress(f"Day {offset + 1}/{settings.days} done.")
        report = metrics.compute_metrics(self.exposure_events)
        self._heldout(report)
        self.save_index()
        for arm in report.arms:
            mean_auc = report.mean_heldout_auc(arm)
            total = report.totals.get(arm)
            self._progress(
                f"[{arm}] held-out AUC "
                f"{'n/a' if mean_auc is None else f'{mean_auc:.4f}'}, CTR "
                f"{'n/a' if total is None or total.ctr is None else f'{total.ctr:.4f}'}"
            )
        result = ExperimentResult(
            settings=settings,
            report=report,
            events=self.events
            + [event.to_record() for event in self.exposure_events],
            efficiency=self.efficiency(),
            timings=self.timings(),
        )
        if self.view is not None:
            self.view.write_report(result)
        return result


def run_ab_experiment(
    settings: config.ExperimentConfig,
    view: interfaces.IReportView | None = None,
    state_dir: str | Path | None = None,
) -> ExperimentResult:
    """Builds a presenter for the settings and runs the experiment."""
    return ExperimentPresenter(settings, view, state_dir).run_ab_experiment()
