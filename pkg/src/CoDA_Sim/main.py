"""Module providing the main entry point for the CoDA-Sim application.

Subcommands:

- ``run``: runs the A/B experiment and writes metrics.csv, summary.json,
  events.ldjson, config.toml and timings.json into the output directory.
- ``stage``: runs one pipeline stage on file inputs.
- ``show-config``: prints the resolved configuration.
- ``verify``: runs the oracle suites.
- ``serve``: serves the batch index a ``run --state-dir`` persisted, over HTTP.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Usage:
    coda-sim run --config bench.toml --seed 7 --out results/ --state-dir state/
    coda-sim serve state/index
"""

import argparse
import logging
import sys
from typing import List, Sequence

from CoDA_Sim.cloud import http_service, match_index
from CoDA_Sim.core import config, exceptions
from CoDA_Sim.presenters import experiment_presenter, stages, verification
from CoDA_Sim.views.report_writer import ReportWriter

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML configuration file.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a setting, e.g. --set cloud.k=20 (repeatable).",
    )
    parser.add_argument("--seed", type=int, help="Master seed.")
    parser.add_argument("--days", type=int, help="Simulated experiment days.")
    parser.add_argument("--devices", type=int, help="Number of simulated devices.")
    parser.add_argument("--jobs", type=int, help="Worker threads for devices.")
    parser.add_argument("--k", type=int, help="Neighbors matched per user.")
    parser.add_argument("--sigma", type=float, help="Filtering threshold.")


def build_parser() -> argparse.ArgumentParser:
    """Builds the argument parser of every subcommand."""
    parser = argparse.ArgumentParser(
        prog="coda-sim",
        description="Device-cloud collaborative learning simulator.",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run the A/B experiment.")
    _add_config_flags(run)
    run.add_argument("--out", default="coda-out", help="Output directory.")
    run.add_argument("--quiet", action="store_true", help="Suppress progress.")
    run.add_argument(
        "--state-dir",
        help="Keep device states and the coda batch index here; "
        "serve reads STATE_DIR/index.",
    )
    run.set_defaults(handler=cmd_run)

    stage = commands.add_parser("stage", help="Run one pipeline stage.")
    stage.add_argument("name", help=f"One of: {', '.join(stages.STAGES)}.")
    stage.add_argument("inputs", nargs="*", help="Input files of the stage.")
    _add_config_flags(stage)
    stage.add_argument("--out", default=".", help="Output directory.")
    stage.set_defaults(handler=cmd_stage)

    show = commands.add_parser("show-config", help="Print the resolved config.")
    _add_config_flags(show)
    show.set_defaults(handler=cmd_show_config)

    verify = commands.add_parser("verify", help="Run the oracle suites.")
    verify.add_argument("--quick", action="store_true", help="Smaller instances.")
    verify.set_defaults(handler=cmd_verify)

    serve = commands.add_parser("serve", help="Serve a persisted MatchIndex.")
    serve.add_argument("index_dir", help="Index directory written by run --state-dir.")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8765)
    serve.add_argument("--day", type=int, help="Current day for retention checks.")
    _add_config_flags(serve)
    serve.set_defaults(handler=cmd_serve)
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Turns dedicated flags into ``key=value`` overrides."""
    overrides = []
    for flag, key in (
        ("seed", "seed"),
        ("days", "days"),
        ("jobs", "jobs"),
        ("k", "cloud.k"),
        ("sigma", "filter.sigma"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return overrides


def resolve_config(args: argparse.Namespace) -> config.ExperimentConfig:
    """Loads the config file, then applies ``--set`` and flag overrides.

    Raises:
        ConfigError: If the file or any override is invalid.
    """
    settings = config.ExperimentConfig()
    if args.config:
        settings = config.load_config(args.config)
    overrides = list(args.overrides) + flag_overrides(args)
    devices = getattr(args, "devices", None)
    if devices is not None:
        overrides.append(f"population.n_users={devices}")
        if devices < settings.population.n_archetypes:
            overrides.append(f"population.n_archetypes={max(2, devices)}")
    if overrides:
        settings = config.apply_overrides(settings, overrides)
    return settings


def cmd_run(args: argparse.Namespace) -> int:
    """Runs the A/B experiment and writes the report."""
    settings = resolve_config(args)
    view = ReportWriter(args.out, verbose=not args.quiet)
    view.show_progress(
        f"Running arms {', '.join(settings.arms)} on "
        f"{settings.population.n_users} devices for {settings.days} days..."
    )
    experiment_presenter.run_ab_experiment(settings, view, args.state_dir)
    return EXIT_OK


def cmd_stage(args: argparse.Namespace) -> int:
    """Runs one pipeline stage."""
    settings = resolve_config(args)
    try:
        written = stages.run_stage(args.name, args.inputs, args.out, settings)
    except ValueError as err:
        print(f"Usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    for path in written:
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_show_config(args: argparse.Namespace) -> int:
    """Prints the resolved configuration as TOML."""
    print(config.dump_config(resolve_config(args)), end="")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    """Runs the oracle suites; fails when any suite fails."""
    results = verification.run_suites(quick=args.quick)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: {result.detail}")
    return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE


def cmd_serve(args: argparse.Namespace) -> int:
    """Loads a persisted MatchIndex and serves it until interrupted."""
    settings = resolve_config(args)
    index = match_index.MatchIndex.load(args.index_dir, settings.cloud)
    print(f"Loaded {len(index.batch_map)} batches from {args.index_dir}")
    http_service.serve(index, args.host, args.port, args.day)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Launches the CoDA-Sim command line.

    Args:
        argv: Arguments without the program name; sys.argv when omitted.

    Returns:
        The process exit code.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except exceptions.ConfigError as err:
        print(f"Configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except exceptions.UnknownStageError as err:
        print(f"Usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except exceptions.CoDAError as err:
        print(f"Error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as err:
        print(f"Error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
