"""This module contains the interfaces for the view component of CoDA-Sim."""

from typing import TYPE_CHECKING, Protocol

if TYPE_CHECKING:
    from CoDA_Sim.presenters.experiment_presenter import ExperimentResult


class IReportView(Protocol):
    """Interface for the Report View.

    This interface outlines the methods that the ExperimentPresenter will interact
    with in the View component (ReportWriter).
    """

    def show_progress(self, message: str) -> None:
        """Reports progress of a running experiment.

        Args:
            message: The progress message to display.
        """

    def display_error(self, message: str) -> None:
        """Reports a device-day aborted by an error.

        Args:
            message: The error message to display.
        """

    def write_report(self, result: "ExperimentResult") -> None:
        """Publishes the result of a finished experiment.

        Args:
            result: Metrics, events and counters of the run.
        """
