"""Module providing the ReportWriter view that writes run artifacts to disk.

Files written into the output directory:

- ``metrics.csv``: one (arm, day, metric, value) row per ratio; accumulated rows
  use day "total" and absent ratios an empty value.
- ``summary.json``: accumulated metrics per arm, relative deltas of the coda arm
  against both baselines, download and compression counters.
- ``events.ldjson``: task events followed by exposure events.
- ``config.toml``: the resolved configuration.
- ``timings.json``: learning wall time per arm.
"""

import csv
import io
import json
from pathlib import Path
from typing import Any, Dict, List

from CoDA_Sim.core import config, metrics
from CoDA_Sim.presenters.experiment_presenter import ExperimentResult
from CoDA_Sim.tunnel import codec

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
EVENTS_FILE = "events.ldjson"
CONFIG_FILE = "config.toml"
TIMINGS_FILE = "timings.json"

BASELINES = ("cloud", "local")


def metrics_csv(report: metrics.MetricsReport) -> str:
    """Renders the metric rows as CSV text."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["arm", "day", "metric", "value"])
    for arm, day, name, value in report.rows():
        writer.writerow([arm, day, name, "" if value is None else repr(value)])
    return buffer.getvalue()


def summarize(result: ExperimentResult) -> Dict[str, Any]:
    """Builds the summary.json document."""
    report = result.report
    arms: Dict[str, Any] = {}
    for arm in report.arms:
        values = report.totals.get(arm)
        entry: Dict[str, Any] = {}
        if values is not None:
            entry.update(
                exp_pv=values.exp_pv,
                clk_pv=values.clk_pv,
                exp_uv=values.exp_uv,
                clk_uv=values.clk_uv,
                **values.ratios(),
            )
        entry["heldout_auc"] = report.mean_heldout_auc(arm)
        entry["heldout_devices"] = len(report.heldout_auc.get(arm, {}))
        arms[arm] = entry
    deltas: Dict[str, Dict[str, float | None]] = {}
    if "coda" in arms:
        for baseline in BASELINES:
            if baseline not in arms:
                continue
            deltas[f"coda_vs_{baseline}"] = {
                name: metrics.relative_delta(
                    arms["coda"].get(name), arms[baseline].get(name)
                )
                for name in metrics.METRIC_NAMES + ("heldout_auc",)
            }
    compression = {}
    coda = result.efficiency.get("coda")
    if coda is not None and coda["raw_bytes"]:
        compression = {
            "encoded_to_raw": coda["compression_ratio"],
            "reduction": 1.0 - coda["compression_ratio"],
            "published_reduction": codec.PUBLISHED_REDUCTION,
        }
    return {
        "arms": arms,
        "relative_deltas": deltas,
        "efficiency": result.efficiency,
        "compression": compression,
        "days": result.settings.days,
        "devices": result.settings.population.n_users,
        "seed": result.settings.seed,
    }


def _json(document: Any) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


class ReportWriter:
    """View writing experiment artifacts and echoing progress.

    Attributes:
        out_dir: Output directory, created on first write.
        verbose: Whether progress is printed.
        errors: Error messages received during the run.
    """

    def __init__(self, out_dir: str | Path, verbose: bool = True) -> None:
        """Initializes the writer.

        Args:
            out_dir: Output directory.
            verbose: Whether progress is printed.
        """
        self.out_dir = Path(out_dir)
        self.verbose = verbose
        self.errors: List[str] = []

    def show_progress(self, message: str) -> None:
        """Prints a progress line."""
        if self.verbose:
            print(message)

    def display_error(self, message: str) -> None:
        """Collects and prints an error line."""
        self.errors.append(message)
        if self.verbose:
            print(f"Error: {message}")

    def write_report(self, result: ExperimentResult) -> None:
        """Writes every artifact of a finished run."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / METRICS_FILE).write_text(
            metrics_csv(result.report), encoding="utf-8"
        )
        (self.out_dir / SUMMARY_FILE).write_text(
            _json(summarize(result)), encoding="utf-8"
        )
        lines = [
            json.dumps(event, sort_keys=True, separators=(",", ":"))
            for event in result.events
        ]
        (self.out_dir / EVENTS_FILE).write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )
        (self.out_dir / CONFIG_FILE).write_text(
            config.dump_config(result.settings), encoding="utf-8"
        )
        (self.out_dir / TIMINGS_FILE).write_text(
            _json(result.timings), encoding="utf-8"
        )
        self.show_progress(f"Wrote report to {self.out_dir}")
