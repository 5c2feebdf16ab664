"""
FTR bidding command line tool.

Used for running scenarios, clearing standalone auctions and checking saved equilibria.
"""
import json
import logging
import os
import pathlib
import subprocess
import sys
import traceback

import click
import tabulate
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

import ftrbid
from ftrbid.exceptions import ConfigError, NonconvergenceError

logger = logging.getLogger("ftrbid")

# Exit codes
EXIT_CONFIG = 1
EXIT_NONCONVERGED = 2
EXIT_ERROR = 3

FORMATS = ["simple", "markdown", "json"]


def _format_option(func):
    return click.option(
        "-f",
        "--format",
        type=click.Choice(FORMATS),
        default="simple",
        show_default=True,
        help="Displays results in another format.",
    )(func)


def _fail(error: Exception, format: str = "simple"):
    """
    Reports an error and exits with the code matching its kind.
    """
    stage = getattr(error, "stage", None)
    message = f"Error in stage {stage}: {error}" if stage else f"Error: {error}"
    if isinstance(error, ConfigError):
        code = EXIT_CONFIG
    elif isinstance(error, NonconvergenceError):
        code = EXIT_NONCONVERGED
    else:
        traceback.print_exc()
        code = EXIT_ERROR
    if format == "json":
        click.echo(json.dumps({"errors": [message]}))
    else:
        click.secho(message, err=True, fg="red")
    sys.exit(code)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.pass_context
@click.option("-d", "--debug", is_flag=True, help="Enables DEBUG level logs.")
@click.option("-v", "--verbose", is_flag=True, help="Enables INFO level logs.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="File path to configuration file. (defaults to config.yml in the user config directory)",
    envvar="FTRBID_CONFIG",
    show_envvar=True,
)
def main(ctx, debug, verbose, config_path):
    # Skip setup if running 'config' command.
    if ctx.invoked_subcommand == "config":
        return

    # Setup configuration
    try:
        ftrbid.config.load(config_path)
    except ConfigError as e:
        click.secho(str(e), err=True)
        click.secho("Run 'ftrbid config' to fix the issue.", err=True)
        sys.exit(EXIT_CONFIG)

    # Setup logging
    ftrbid.setup_logging()
    if debug:
        logging.root.setLevel(logging.DEBUG)
    elif verbose:
        logging.root.setLevel(logging.INFO)
    # else let log_config.yml set log level.


@main.command()
def config():
    """Opens up configuration file for editing."""
    file_path = ftrbid.config.user_path
    click.echo(file_path)
    if not sys.stdout.isatty():
        return
    if sys.platform == "win32":
        try:
            os.startfile(file_path, "edit")
        except OSError:
            os.startfile(file_path)
    else:
        opener = "open" if sys.platform == "darwin" else "xdg-open"
        subprocess.call([opener, file_path])


def _print_report(report, format: str):
    click.echo(report.as_text(format))


@main.command()
@click.option(
    "-o",
    "--output-dir",
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    envvar="FTRBID_OUTPUT_DIR",
    show_envvar=True,
    help="Directory to write the tables and summary.json to. (defaults to OUTPUT_DIR or the current directory)",
)
@click.option("--seed", type=int, help="Seed of the complementarity solve.")
@click.option("--tolerance", type=float, help="Nash tolerance.")
@click.option("--grid", "grid_resolution", type=click.IntRange(min=1), help="Points per dimension of the bid grids.")
@click.option("--max-rounds", type=click.IntRange(min=1), help="Best response rounds before giving up.")
@click.option(
    "--update",
    type=click.Choice(["sequential", "simultaneous"]),
    help="Whether best responses are committed per player or per round.",
)
@click.option("-j", "--processes", type=click.IntRange(min=1), help="Worker processes used to evaluate players.")
@click.option("--no-kkt", is_flag=True, help="Skip the joint complementarity solve.")
@_format_option
@click.argument("scenario", required=True)
def run(scenario, output_dir, seed, tolerance, grid_resolution, max_rounds, update, processes, no_kkt, format):
    """
    Runs the full bidding pipeline on a scenario.

    \b
    SCENARIO: Scenario file or the name of a builtin scenario.

    \b
    Common usages::
        ftrbid run eight_bus                      - Run the builtin eight bus scenario
        ftrbid run ./case.yml -o ./results        - Run a scenario and write tables to ./results
        ftrbid run eight_bus --grid 5 --no-kkt    - Coarser bid grid, skip the joint solve
        ftrbid run eight_bus -f json              - Display the summary as json
    """
    overrides = dict(
        seed=seed,
        nash_tolerance=tolerance,
        grid_resolution=grid_resolution,
        max_rounds=max_rounds,
        update=update,
        processes=processes,
    )
    if no_kkt:
        overrides["solve_kkt"] = False

    try:
        report = ftrbid.run(scenario, solver_overrides=overrides)
        ftrbid.emit_tables(report, output_dir)
    except Exception as e:
        _fail(e, format)
        return

    _print_report(report, format)
    if not report.converged:
        click.secho(f"Run finished with status {report.status}.", err=True, fg="yellow")
        sys.exit(EXIT_NONCONVERGED)


@main.command()
@click.option(
    "-o",
    "--output-dir",
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    help="Directory to write the tables and summary.json to. If not provided, nothing is written.",
)
@_format_option
@click.argument("scenario", required=True)
def metrics(scenario, output_dir, format):
    """
    Computes path risk and player contribution metrics only.

    \b
    SCENARIO: Scenario file or the name of a builtin scenario.
    """
    try:
        report = ftrbid.metrics(scenario, output_directory=output_dir)
    except Exception as e:
        _fail(e, format)
        return
    _print_report(report, format)


def _read_document(path: pathlib.Path) -> dict:
    try:
        with open(path, "r") as fo:
            return YAML(typ="safe").load(fo)
    except YAMLError as e:
        raise ConfigError(f"Error parsing {path}: {e}")


@main.command()
@_format_option
@click.argument("instance", type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
def clear(instance, format):
    """
    Clears a standalone FTR auction.

    \b
    INSTANCE: YAML or JSON document with lines, impact rows per path and offers.
    """
    try:
        outcome = ftrbid.clear_instance(_read_document(instance))
    except Exception as e:
        _fail(e, format)
        return

    awards = [
        {
            "player": offer.player,
            "path": offer.path,
            "ftr_type": offer.ftr_type,
            "price": offer.price,
            "award": float(award),
            "upper_dual": float(upper),
            "lower_dual": float(lower),
        }
        for offer, award, upper, lower in zip(
            outcome.instance.offers, outcome.awards, outcome.upper_duals, outcome.lower_duals
        )
    ]
    line_ids = outcome.instance.line_ids or tuple(range(1, len(outcome.flows) + 1))
    lines = [
        {
            "line": line_id,
            "flow": float(flow),
            "limit": float(limit),
            "dual": float(dual),
            "binding": bool(binding),
        }
        for line_id, flow, limit, dual, binding in zip(
            line_ids, outcome.flows, outcome.instance.limits, outcome.line_duals, outcome.binding
        )
    ]
    if format == "json":
        click.echo(json.dumps({
            "revenue": outcome.revenue,
            "awards": awards,
            "lines": lines,
            "stationarity_residual": outcome.stationarity_residual,
            "complementarity_residual": outcome.complementarity_residual,
        }, indent=4))
        return

    tablefmt = "pipe" if format == "markdown" else "simple"
    click.echo(tabulate.tabulate(awards, headers="keys", tablefmt=tablefmt, floatfmt=".4f"))
    click.echo()
    click.echo(tabulate.tabulate(lines, headers="keys", tablefmt=tablefmt, floatfmt=".4f"))
    click.echo()
    click.echo(f"Revenue: {outcome.revenue:.4f}")


@main.command()
@click.option("--grid", "grid_resolution", type=click.IntRange(min=1), help="Points per dimension of the deviation grid.")
@click.option("--tolerance", type=float, help="Accepted profit improvement.")
@click.argument("scenario", required=True)
@click.argument("summary", type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
def verify(scenario, summary, grid_resolution, tolerance):
    """
    Checks a saved equilibrium against unilateral deviations.

    \b
    SCENARIO: Scenario file or the name of a builtin scenario the summary came from.
    SUMMARY: summary.json written by "ftrbid run".
    """
    try:
        nash, _ = ftrbid.verify(scenario, summary, grid_resolution=grid_resolution, tolerance=tolerance)
    except Exception as e:
        _fail(e)
        return

    click.echo(tabulate.tabulate(
        sorted(nash.improvements.items()), headers=["PLAYER", "IMPROVEMENT"], floatfmt=".6f"
    ))
    click.echo()
    click.echo(f"Deviations evaluated: {nash.evaluated} ({nash.joint_evaluated} changing several paths)")
    click.echo(f"Largest improvement: {nash.max_improvement:.6f} (tolerance {nash.tolerance})")
    if nash.certified:
        click.secho("Profile is an ε-Nash equilibrium.", fg="green")
    else:
        bids = "; ".join(
            f"{bid.path} {bid.ftr_type} at {bid.price:.4f} for {bid.quantity:.4f} MW" for bid in nash.deviation
        )
        click.secho(f"Profile is not an ε-Nash equilibrium: {nash.player} can deviate to {bids}", fg="red")
        sys.exit(EXIT_NONCONVERGED)


@main.command()
def schema():
    """
    Displays JSON Schema of scenario documents.
    """
    click.echo(json.dumps(ftrbid.schema(), indent=4))


@main.command()
def scenarios():
    """
    Lists the builtin scenarios.
    """
    for name in ftrbid.builtin_scenarios():
        click.echo(name)


if __name__ == "__main__":
    main(sys.argv[1:])
