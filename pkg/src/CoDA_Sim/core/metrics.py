"""Module providing the simulated online metrics of an A/B experiment.

For a set of exposures:

- CTR = clicks / exposures (clkPV/expPV)
- clkPV/expUV = clicks / distinct exposed users
- clkUV/expUV = distinct clicking users / distinct exposed users

Ratios over zero exposures are absent (None), never 0.
"""

import dataclasses
import json
from collections import defaultdict
from typing import Dict, Iterable, List, Set, Tuple

METRIC_NAMES: Tuple[str, ...] = ("ctr", "clk_pv_per_exp_uv", "clk_uv_per_exp_uv")
TOTAL = "total"


@dataclasses.dataclass(frozen=True)
class ExposureEvent:
    """One served exposure.

    Attributes:
        arm: Experiment arm that served it.
        day: Day of the exposure.
        user_id: Exposed user.
        clicked: 1 if the exposure was clicked, else 0.
    """

    arm: str
    day: int
    user_id: int
    clicked: int

    def to_record(self) -> dict:
        """JSON-ready representation, as written to events.ldjson."""
        return {
            "arm": self.arm,
            "clicked": self.clicked,
            "day": self.day,
            "event": "exposure",
            "user_id": self.user_id,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ExposureEvent":
        """Inverse of ``to_record``."""
        return cls(
            arm=str(record["arm"]),
            day=int(record["day"]),
            user_id=int(record["user_id"]),
            clicked=int(record["clicked"]),
        )


@dataclasses.dataclass(frozen=True)
class MetricValues:
    """Page-view and unique-visitor counts of a set of exposures.

    Attributes:
        exp_pv: Exposures.
        clk_pv: Clicks.
        exp_uv: Distinct exposed users.
        clk_uv: Distinct users with at least one click.
    """

    exp_pv: int
    clk_pv: int
    exp_uv: int
    clk_uv: int

    @property
    def ctr(self) -> float | None:
        """clkPV/expPV."""
        return self.clk_pv / self.exp_pv if self.exp_pv else None

    @property
    def clk_pv_per_exp_uv(self) -> float | None:
        """Average clicks per exposed user."""
        return self.clk_pv / self.exp_uv if self.exp_uv else None

    @property
    def clk_uv_per_exp_uv(self) -> float | None:
        """Share of exposed users who clicked."""
        return self.clk_uv / self.exp_uv if self.exp_uv else None

    def ratios(self) -> Dict[str, float | None]:
        """The three ratios keyed by METRIC_NAMES."""
        return {name: getattr(self, name) for name in METRIC_NAMES}


class _Tally:
    def __init__(self) -> None:
        self.exp_pv = 0
        self.clk_pv = 0
        self.exposed: Set[int] = set()
        self.clicked: Set[int] = set()

    def add(self, event: ExposureEvent) -> None:
        self.exp_pv += 1
        self.exposed.add(event.user_id)
        if event.clicked:
            self.clk_pv += 1
            self.clicked.add(event.user_id)

    def values(self) -> MetricValues:
        return MetricValues(
            self.exp_pv, self.clk_pv, len(self.exposed), len(self.clicked)
        )


@dataclasses.dataclass
class MetricsReport:
    """Metrics of every arm, per day and accumulated.

    Attributes:
        daily: Values keyed by (arm, day).
        totals: Accumulated values keyed by arm; UV counts are distinct users
            over the whole run.
        heldout_auc: Held-out AUC of each arm keyed by device id.
    """

    daily: Dict[Tuple[str, int], MetricValues] = dataclasses.field(
        default_factory=dict
    )
    totals: Dict[str, MetricValues] = dataclasses.field(default_factory=dict)
    heldout_auc: Dict[str, Dict[int, float]] = dataclasses.field(
        default_factory=dict
    )

    @property
    def arms(self) -> List[str]:
        """Arms present in the report, sorted."""
        return sorted(set(self.totals) | set(self.heldout_auc))

    def mean_heldout_auc(self, arm: str) -> float | None:
        """Mean held-out AUC over the devices of an arm."""
        values = list(self.heldout_auc.get(arm, {}).values())
        return sum(values) / len(values) if values else None

    def rows(self) -> List[Tuple[str, str, str, float | None]]:
        """(arm, day, metric, value) rows; accumulated rows use day "total"."""
        rows: List[Tuple[str, str, str, float | None]] = []
        for arm, day in sorted(self.daily):
            for name, value in self.daily[(arm, day)].ratios().items():
                rows.append((arm, str(day), name, value))
        for arm in sorted(self.totals):
            for name, value in self.totals[arm].ratios().items():
                rows.append((arm, TOTAL, name, value))
        return rows


def compute_metrics(events: Iterable[ExposureEvent]) -> MetricsReport:
    """Counts exposures, clicks and distinct users per arm and day.

    Args:
        events: Exposure events of any arms and days.

    Returns:
        The report; held-out AUCs are left empty.
    """
    daily: Dict[Tuple[str, int], _Tally] = defaultdict(_Tally)
    totals: Dict[str, _Tally] = defaultdict(_Tally)
    for event in events:
        daily[(event.arm, event.day)].add(event)
        totals[event.arm].add(event)
    return MetricsReport(
        daily={key: tally.values() for key, tally in daily.items()},
        totals={arm: tally.values() for arm, tally in totals.items()},
    )


def read_exposures(text: str) -> List[ExposureEvent]:
    """Parses the exposure events of an events.ldjson log; other events skip."""
    events = []
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("event") == "exposure":
            events.append(ExposureEvent.from_record(record))
    return events


def relative_delta(value: float | None, baseline: float | None) -> float | None:
    """(value - baseline) / baseline, None when undefined."""
    if value is None or baseline is None or baseline == 0:
        return None
    return (value - baseline) / baseline
