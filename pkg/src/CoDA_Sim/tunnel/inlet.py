"""Module providing the quota'd down tunnel.

A ``BatchInlet`` is the device end of the down tunnel: it walks the cloud's
per-user batch list, pulls each batch at most once and enforces the daily pull
quota. ``DownTunnel`` keeps one inlet per registered device.
"""

import dataclasses
import logging
import time
from typing import Dict, List, Protocol, Set

import numpy as np

from CoDA_Sim.core import config, exceptions, samples
from CoDA_Sim.tunnel import codec

logger = logging.getLogger(__name__)

PULLED = "pulled"
QUOTA_EXHAUSTED = "quota_exhausted"
NO_MORE_BATCHES = "no_more_batches"


class BatchSource(Protocol):
    """Cloud side of the down tunnel."""

    def list_batches(self, user_id: int) -> List[str]:
        """Returns the live batch ids of a user, in serving order."""

    def query_batch(
        self, user_id: int, batch_id: str, now_day: int | None = None
    ) -> codec.EncodedPayload:
        """Returns the encoded payload of one batch."""


@dataclasses.dataclass
class QuotaState:
    """Per-device pull quota.

    Attributes:
        day: Day the counter refers to.
        batches_pulled_today: Successful pulls on ``day``.
        daily_limit: Maximum successful pulls per day.
    """

    day: int = 0
    batches_pulled_today: int = 0
    daily_limit: int = 12

    def roll(self, now_day: int) -> None:
        """Resets the counter when the day changes."""
        if now_day != self.day:
            self.day = now_day
            self.batches_pulled_today = 0

    @property
    def exhausted(self) -> bool:
        """True when no pull is left today."""
        return self.batches_pulled_today >= self.daily_limit

    def consume(self) -> None:
        """Counts one successful pull."""
        if self.exhausted:
            raise RuntimeError("Quota already exhausted.")
        self.batches_pulled_today += 1


@dataclasses.dataclass(frozen=True)
class PullResult:
    """Outcome of one pull.

    Attributes:
        status: PULLED, QUOTA_EXHAUSTED or NO_MORE_BATCHES.
        batch_id: Id of the pulled batch, if any.
        samples: Decoded samples of the pulled batch.
        payload_chars: Characters received over the wire.
        raw_bytes: Uncompressed size of the pulled batch.
    """

    status: str
    batch_id: str | None = None
    samples: List[samples.Sample] = dataclasses.field(default_factory=list)
    payload_chars: int = 0
    raw_bytes: int = 0

    @property
    def terminal(self) -> bool:
        """True for both end-of-day markers."""
        return self.status != PULLED


class Transport:
    """Simulated network between a device and the cloud.

    Attributes:
        source: Cloud batch source.
        failure_rate: Probability a request is dropped.
        latency_s: Seconds slept per request.
        rng: Generator of the failure draws.
    """

    def __init__(
        self,
        source: BatchSource,
        failure_rate: float = 0.0,
        latency_s: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> None:
        """Initializes the transport.

        Args:
            source: Cloud batch source.
            failure_rate: Probability a request is dropped, in [0, 1).
            latency_s: Seconds slept per request.
            rng: Generator of the failure draws.
        """
        self.source = source
        self.failure_rate = failure_rate
        self.latency_s = latency_s
        self.rng = rng or np.random.default_rng(0)

    def fetch(self, user_id: int, batch_id: str, now_day: int) -> codec.EncodedPayload:
        """Requests one batch.

        Raises:
            TransportError: If the simulated request is dropped.
        """
        if self.latency_s > 0:
            time.sleep(self.latency_s)
        if self.failure_rate > 0 and self.rng.random() < self.failure_rate:
            raise exceptions.TransportError(
                f"Request for batch {batch_id} of user {user_id} was dropped."
            )
        return self.source.query_batch(user_id, batch_id, now_day)


class BatchInlet:
    """Device end of the down tunnel.

    Attributes:
        device_id: Id of the owning device (equal to its user id).
        transport: Transport the batches travel over.
        quota: Daily pull quota.
        pulled: Ids of batches already pulled.
    """

    def __init__(
        self, device_id: int, transport: Transport, daily_limit: int = 12
    ) -> None:
        """Initializes the inlet.

        Args:
            device_id: Id of the owning device.
            transport: Transport the batches travel over.
            daily_limit: Maximum successful pulls per day.
        """
        self.device_id = device_id
        self.transport = transport
        self.quota = QuotaState(daily_limit=daily_limit)
        self.pulled: Set[str] = set()

    def pull_next_batch(self, now_day: int) -> PullResult:
        """Pulls and decodes the next batch not pulled before.

        Args:
            now_day: Current day; a new day resets the quota.

        Returns:
            The decoded batch or a terminal marker.

        Raises:
            TransportError: If the request is dropped; quota is not consumed.
            PayloadCorruptionError: If the payload fails its integrity checks.
            PayloadParseError: If the payload cannot be decoded.
        """
        self.quota.roll(now_day)
        if self.quota.exhausted:
            return PullResult(QUOTA_EXHAUSTED)
        source = self.transport.source
        for batch_id in source.list_batches(self.device_id):
            if batch_id in self.pulled:
                continue
            try:
                payload = self.transport.fetch(self.device_id, batch_id, now_day)
            except exceptions.BatchGoneError:
                logger.debug("Batch %s expired before it was pulled.", batch_id)
                self.pulled.add(batch_id)
                continue
            decoded = codec.decode_payload(payload)
            self.pulled.add(batch_id)
            self.quota.consume()
            return PullResult(
                PULLED,
                batch_id=batch_id,
                samples=decoded,
                payload_chars=len(payload.text),
                raw_bytes=payload.declared_raw_len,
            )
        return PullResult(NO_MORE_BATCHES)

    def forget(self, live_batch_ids: Set[str]) -> None:
        """Drops bookkeeping of batches the cloud no longer serves."""
        self.pulled &= live_batch_ids


class DownTunnel:
    """Registry of device inlets over one batch source.

    Attributes:
        source: Cloud batch source.
        settings: Tunnel settings.
        seed: Seed of the per-device failure streams.
        inlets: Inlets keyed by device id.
    """

    def __init__(
        self, source: BatchSource, settings: config.TunnelConfig, seed: int = 0
    ) -> None:
        """Initializes an empty registry.

        Args:
            source: Cloud batch source.
            settings: Tunnel settings.
            seed: Seed of the per-device failure streams.
        """
        self.source = source
        self.settings = settings
        self.seed = seed
        self.inlets: Dict[int, BatchInlet] = {}

    def register(self, device_id: int) -> BatchInlet:
        """Registers a device and returns its inlet."""
        if device_id not in self.inlets:
            transport = Transport(
                self.source,
                self.settings.failure_rate,
                self.settings.latency_s,
                np.random.default_rng([self.seed, 2, device_id]),
            )
            self.inlets[device_id] = BatchInlet(
                device_id, transport, self.settings.daily_limit
            )
        return self.inlets[device_id]

    def pull_next_batch(self, device_id: int, now_day: int) -> PullResult:
        """Pulls the next batch of a registered device.

        Raises:
            DeviceNotRegisteredError: If the device was never registered.
        """
        inlet = self.inlets.get(device_id)
        if inlet is None:
            raise exceptions.DeviceNotRegisteredError(
                f"Device {device_id} is not registered."
            )
        return inlet.pull_next_batch(now_day)
