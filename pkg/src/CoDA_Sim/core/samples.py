"""Module providing the Sample record shared by cloud, tunnel and device.

Samples serialize to canonical JSON: keys in sorted order, no whitespace, UTF-8.
The documented key order is therefore::

    animation, behavior_seq, behavior_stats, click_seq, day, label, profile,
    sample_id, target_item, user_id

Line-delimited files hold one such object per line, each line ending in "\\n".
"""

import dataclasses
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple

from CoDA_Sim.core import config, exceptions

MAX_BEHAVIOR_LEN = 512
SAMPLE_KEYS: Tuple[str, ...] = (
    "animation",
    "behavior_seq",
    "behavior_stats",
    "click_seq",
    "day",
    "label",
    "profile",
    "sample_id",
    "target_item",
    "user_id",
)

_USER_STRIDE = 1_000_000_000
_DAY_STRIDE = 100_000
_STREAM_STRIDE = 25_000
MAX_DAYS = 10_000
MAX_STREAMS = 4


def make_sample_id(user_id: int, day: int, index: int, stream: int = 0) -> int:
    """Packs (user, day, exposure index, stream) into a population-unique id.

    Args:
        user_id: Owner of the sample.
        day: Day index, 0 <= day < 10_000.
        index: Exposure index within the day, 0 <= index < 25_000.
        stream: Generator stream, 0 <= stream < 4.

    Returns:
        The packed sample id.

    Raises:
        InvalidPopulationError: If a field is outside its range; the packed
            id would collide with another sample's.
    """
    for name, value, limit in (
        ("day", day, MAX_DAYS),
        ("index", index, _STREAM_STRIDE),
        ("stream", stream, MAX_STREAMS),
    ):
        if not 0 <= value < limit:
            raise exceptions.InvalidPopulationError(
                f"Sample {name} {value} is outside [0, {limit})."
            )
    if user_id < 0:
        raise exceptions.InvalidPopulationError(f"Negative user id {user_id}.")
    return (
        user_id * _USER_STRIDE + day * _DAY_STRIDE + stream * _STREAM_STRIDE + index
    )


@dataclasses.dataclass(frozen=True)
class Sample:
    """One labeled exposure record.

    Attributes:
        sample_id: Population-wide unique id.
        user_id: User whose exposure produced the sample.
        day: Day index the sample was generated on.
        target_item: Id of the exposed item.
        animation: Animation type, one of "bubble", "gif", "none".
        profile: User profile vector.
        click_seq: Recently clicked item ids, oldest first.
        behavior_seq: Behavior token ids, at most 512 of them.
        behavior_stats: Statistics vector of the behavior sequence.
        label: 1 if the exposure was clicked, else 0.
    """

    sample_id: int
    user_id: int
    day: int
    target_item: int
    animation: str
    profile: Tuple[float, ...]
    click_seq: Tuple[int, ...]
    behavior_seq: Tuple[int, ...]
    behavior_stats: Tuple[float, ...]
    label: int

    @property
    def animation_index(self) -> int:
        """Index of the animation type in config.ANIMATIONS."""
        return config.ANIMATIONS.index(self.animation)

    def with_label(self, label: int) -> "Sample":
        """Returns a copy carrying a different label."""
        return dataclasses.replace(self, label=label)

    def to_record(self) -> Dict[str, Any]:
        """Returns the JSON-ready dictionary of this sample."""
        return {
            "animation": self.animation,
            "behavior_seq": list(self.behavior_seq),
            "behavior_stats": list(self.behavior_stats),
            "click_seq": list(self.click_seq),
            "day": self.day,
            "label": self.label,
            "profile": list(self.profile),
            "sample_id": self.sample_id,
            "target_item": self.target_item,
            "user_id": self.user_id,
        }

    @classmethod
    def from_record(cls, record: Any) -> "Sample":
        """Builds a sample from a decoded JSON object.

        Args:
            record: Object parsed from one JSON line.

        Returns:
            The sample.

        Raises:
            SampleParseError: If keys, types or values are invalid.
        """
        if not isinstance(record, dict) or set(record) != set(SAMPLE_KEYS):
            raise exceptions.SampleParseError("Sample record has unexpected keys.")
        for key in ("sample_id", "user_id", "day", "target_item", "label"):
            if not _is_int(record[key]):
                raise exceptions.SampleParseError(f"Sample field '{key}' is not int.")
        if record["label"] not in (0, 1):
            raise exceptions.SampleParseError("Sample label must be 0 or 1.")
        if record["animation"] not in config.ANIMATIONS:
            raise exceptions.SampleParseError("Sample animation type is unknown.")
        for key in ("click_seq", "behavior_seq"):
            value = record[key]
            if not isinstance(value, list) or not all(_is_int(v) for v in value):
                raise exceptions.SampleParseError(f"Sample field '{key}' is invalid.")
        if len(record["behavior_seq"]) > MAX_BEHAVIOR_LEN:
            raise exceptions.SampleParseError("Behavior sequence exceeds 512.")
        for key in ("profile", "behavior_stats"):
            value = record[key]
            if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
            ):
                raise exceptions.SampleParseError(f"Sample field '{key}' is invalid.")
        return cls(
            sample_id=record["sample_id"],
            user_id=record["user_id"],
            day=record["day"],
            target_item=record["target_item"],
            animation=record["animation"],
            profile=tuple(float(v) for v in record["profile"]),
            click_seq=tuple(record["click_seq"]),
            behavior_seq=tuple(record["behavior_seq"]),
            behavior_stats=tuple(float(v) for v in record["behavior_stats"]),
            label=record["label"],
        )


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def canonical_json(sample: Sample) -> str:
    """Serializes one sample as canonical JSON (sorted keys, no whitespace)."""
    return json.dumps(
        sample.to_record(),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def to_ldjson(samples: Iterable[Sample]) -> bytes:
    """Serializes samples as canonical line-delimited JSON bytes."""
    return "".join(canonical_json(sample) + "\n" for sample in samples).encode(
        "utf-8"
    )


def from_ldjson(data: bytes) -> List[Sample]:
    """Parses canonical line-delimited JSON bytes back into samples.

    Args:
        data: UTF-8 encoded LDJSON.

    Returns:
        The samples in file order.

    Raises:
        SampleParseError: If any line is not a valid sample record.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as err:
        raise exceptions.SampleParseError("Payload is not UTF-8.") from err
    samples = []
    for line in text.splitlines():
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise exceptions.SampleParseError(f"Invalid JSON line: {err}") from err
        samples.append(Sample.from_record(record))
    return samples


def write_samples(path: str | Path, samples: Iterable[Sample]) -> None:
    """Writes samples to an LDJSON file."""
    Path(path).write_bytes(to_ldjson(samples))


def read_samples(path: str | Path) -> List[Sample]:
    """Reads samples from an LDJSON file."""
    return from_ldjson(Path(path).read_bytes())
