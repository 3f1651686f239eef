"""Unit tests for the simulated online metrics."""

import json
from collections import defaultdict
from typing import Dict, List, Set

import numpy as np
import pytest

from CoDA_Sim.core import metrics


def _events(arm: str, day: int, clicks: Dict[int, int], per_user: int) -> List:
    events = []
    for user_id, n_clicks in clicks.items():
        for index in range(per_user):
            events.append(
                metrics.ExposureEvent(arm, day, user_id, int(index < n_clicks))
            )
    return events


def test_hand_computed_ratios() -> None:
    """Tests two users with 10 exposures each, 4 and 0 clicks."""
    report = metrics.compute_metrics(_events("coda", 0, {0: 4, 1: 0}, 10))
    total = report.totals["coda"]

    assert (total.exp_pv, total.clk_pv, total.exp_uv, total.clk_uv) == (20, 4, 2, 1)
    assert total.ctr == pytest.approx(0.2)
    assert total.clk_pv_per_exp_uv == pytest.approx(2.0)
    assert total.clk_uv_per_exp_uv == pytest.approx(0.5)


def test_no_clicks_gives_zero_not_absent() -> None:
    """Tests that zero clicks over exposures give zero ratios."""
    total = metrics.compute_metrics(_events("cloud", 0, {0: 0}, 5)).totals["cloud"]

    assert total.ctr == 0.0
    assert total.clk_uv_per_exp_uv == 0.0


def test_zero_exposures_are_absent() -> None:
    """Tests that ratios over zero exposures are None."""
    values = metrics.MetricValues(0, 0, 0, 0)

    assert values.ratios() == {name: None for name in metrics.METRIC_NAMES}


def test_totals_count_distinct_users_over_days() -> None:
    """Tests that accumulated UV counts are distinct over the whole run."""
    events = _events("local", 0, {0: 1, 1: 0}, 2) + _events("local", 1, {0: 0}, 2)

    report = metrics.compute_metrics(events)

    assert report.daily[("local", 0)].exp_uv == 2
    assert report.daily[("local", 1)].exp_uv == 1
    assert report.totals["local"].exp_uv == 2
    assert report.totals["local"].clk_uv == 1


def test_random_log_matches_naive_recount() -> None:
    """Tests the counters against an independent recount of a random log."""
    rng = np.random.default_rng(0)
    events = [
        metrics.ExposureEvent(
            str(rng.choice(["cloud", "coda"])),
            int(rng.integers(0, 3)),
            int(rng.integers(0, 15)),
            int(rng.random() < 0.3),
        )
        for _ in range(500)
    ]

    report = metrics.compute_metrics(events)

    exposed: Dict[str, Set[int]] = defaultdict(set)
    clicked: Dict[str, Set[int]] = defaultdict(set)
    clicks: Dict[str, int] = defaultdict(int)
    shown: Dict[str, int] = defaultdict(int)
    for event in events:
        shown[event.arm] += 1
        exposed[event.arm].add(event.user_id)
        if event.clicked:
            clicks[event.arm] += 1
            clicked[event.arm].add(event.user_id)
    for arm, total in report.totals.items():
        assert total.ctr == clicks[arm] / shown[arm]
        assert total.clk_pv_per_exp_uv == clicks[arm] / len(exposed[arm])
        assert total.clk_uv_per_exp_uv == len(clicked[arm]) / len(exposed[arm])


def test_rows_include_daily_and_total() -> None:
    """Tests the (arm, day, metric, value) row layout."""
    report = metrics.compute_metrics(_events("coda", 3, {0: 1}, 2))

    rows = report.rows()

    assert rows[0] == ("coda", "3", "ctr", 0.5)
    assert ("coda", metrics.TOTAL, "clk_uv_per_exp_uv", 1.0) in rows
    assert len(rows) == 2 * len(metrics.METRIC_NAMES)


def test_read_exposures_skips_other_events() -> None:
    """Tests that only exposure records are parsed from an event log."""
    exposure = metrics.ExposureEvent("cloud", 1, 4, 1)
    lines = [
        json.dumps({"event": "commit", "arm": "coda", "day": 1}),
        "",
        json.dumps(exposure.to_record()),
    ]

    assert metrics.read_exposures("\n".join(lines)) == [exposure]


def test_mean_heldout_auc() -> None:
    """Tests averaging held-out AUC over devices."""
    report = metrics.MetricsReport(heldout_auc={"coda": {0: 0.6, 1: 0.8}})

    assert report.mean_heldout_auc("coda") == pytest.approx(0.7)
    assert report.mean_heldout_auc("cloud") is None
    assert report.arms == ["coda"]


@pytest.mark.parametrize(
    "value, baseline, expected",
    [(0.11, 0.1, 0.1), (None, 0.1, None), (0.1, 0.0, None), (0.1, None, None)],
)
def test_relative_delta(
    value: float | None, baseline: float | None, expected: float | None
) -> None:
    """Tests the relative delta and its undefined cases.

    Args:
        value: Treatment value.
        baseline: Baseline value.
        expected: Expected delta.
    """
    if expected is None:
        assert metrics.relative_delta(value, baseline) is None
    else:
        assert metrics.relative_delta(value, baseline) == pytest.approx(expected)
