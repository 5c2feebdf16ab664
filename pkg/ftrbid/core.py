"""
Library entry points.
"""
import functools
import json
import logging
import pathlib
from importlib import resources
from typing import Mapping, Optional, Tuple, Union

import attr
import jsonschema
import numpy as np

from ftrbid import elements
from ftrbid.clearing import ClearingOutcome, Offer, build_instance, clear_market
from ftrbid.contribution import FTR_TYPES, BidDecision
from ftrbid.equilibrium import Game, NashReport, build_game, verify_nash
from ftrbid.exceptions import ConfigError, SchemaError
from ftrbid.report import RunReport
from ftrbid.scenario import emit_tables, load_scenario, run_scenario

logger = logging.getLogger(__name__)

ScenarioLike = Union[str, pathlib.Path, elements.ScenarioConfig]


def _scenario(scenario: ScenarioLike, solver_overrides: Optional[dict] = None) -> elements.ScenarioConfig:
    if isinstance(scenario, elements.ScenarioConfig):
        if solver_overrides:
            overrides = {key: value for key, value in solver_overrides.items() if value is not None}
            solver = elements.SolverOptions.from_dict({**scenario.solver.as_dict(), **overrides})
            scenario = attr.evolve(scenario, solver=solver)
        return scenario
    return load_scenario(scenario, solver_overrides)


def run(
        scenario: ScenarioLike,
        *,
        output_directory: Union[str, pathlib.Path] = None,
        solver_overrides: Optional[dict] = None,
        metrics_only: bool = False,
) -> RunReport:
    """
    Runs the FTR bidding pipeline on a scenario.

    :param scenario: Scenario file, builtin scenario name or an already loaded ScenarioConfig.
    :param output_directory: Directory to write the tables and summary to.
        If not provided, nothing is written.
    :param solver_overrides: Solver options taking precedence over the scenario's.
    :param metrics_only: Stop after the risk and contribution metrics.

    :return: RunReport containing the results.
    """
    config = _scenario(scenario, solver_overrides)
    report = run_scenario(config, metrics_only=metrics_only)
    if output_directory:
        emit_tables(report, output_directory)
    return report


def metrics(scenario: ScenarioLike, **kwargs) -> RunReport:
    """
    Computes the path risk and player contribution metrics without playing the auction.
    """
    return run(scenario, metrics_only=True, **kwargs)


@functools.lru_cache(maxsize=None)
def _clearing_schema() -> dict:
    with resources.files("ftrbid.config").joinpath("clearing_schema.json").open("r") as fo:
        return json.load(fo)


def clear_instance(document: Mapping) -> ClearingOutcome:
    """
    Clears a standalone auction document.

    :param document: Mapping with "lines" (id and capacity), "paths" (impact row per path name)
        and "offers". "tie_break" and "tolerance" are optional.
    :raises SchemaError: If the document is malformed or an offer names an unknown path.
    """
    if not isinstance(document, Mapping):
        raise SchemaError("Clearing instance must be a mapping.")
    try:
        jsonschema.validate(dict(document), _clearing_schema())
    except jsonschema.ValidationError as e:
        location = "/".join(str(part) for part in e.absolute_path) or "<root>"
        raise SchemaError(f"Invalid clearing instance at {location}: {e.message}")

    lines = document["lines"]
    path_impacts = {}
    for name, row in document["paths"].items():
        if len(row) != len(lines):
            raise SchemaError(f"Path {name} has {len(row)} impact coefficients for {len(lines)} lines.")
        path_impacts[name] = np.asarray(row, dtype=float)

    offers = []
    for entry in document["offers"]:
        if entry["path"] not in path_impacts:
            raise SchemaError(f"Offer of {entry['player']} names unknown path {entry['path']}")
        offers.append(Offer(**entry))

    defaults = elements.SolverOptions()
    instance = build_instance(
        offers,
        path_impacts,
        [line["capacity"] for line in lines],
        line_ids=[line["id"] for line in lines],
        tie_break=document.get("tie_break", defaults.tie_break),
        tolerance=document.get("tolerance", defaults.lp_tolerance),
    )
    return clear_market(instance)


def build_scenario_game(report: RunReport) -> Game:
    """
    Builds the auction game from a report holding the risk and contribution metrics.
    """
    if not report.risks and report.paths:
        raise ConfigError("Report has no metrics to build the game from.")
    return build_game(
        report.contributions,
        report.risks,
        report.config.players,
        report.path_impacts,
        report.network.capacity,
        line_ids=[line.id for line in report.network.lines],
        options=report.config.solver,
    )


def load_decisions(summary: Union[str, pathlib.Path, Mapping], section: str = "equilibrium") -> dict:
    """
    Reads the bids of a saved run summary.

    :param summary: Path to summary.json or its parsed contents.
    :param section: "equilibrium" or "joint"
    :return: Bid per (player, path), without awards.
    :raises ConfigError: If the summary can't be read or holds no such section.
    """
    if not isinstance(summary, Mapping):
        try:
            summary = json.loads(pathlib.Path(summary).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError(f"Unable to read summary {summary}: {e}")
    solution = summary.get(section)
    if not solution:
        raise ConfigError(f"Summary has no {section} decisions.")
    profile = {}
    for result in solution["decisions"]:
        decision = elements.cattr.structure(result["decision"], BidDecision)
        profile[decision.key] = attr.evolve(decision, award=None)
    return profile


def verify(
        scenario: ScenarioLike,
        summary: Union[str, pathlib.Path, Mapping],
        *,
        grid_resolution: Optional[int] = None,
        tolerance: Optional[float] = None,
) -> Tuple[NashReport, RunReport]:
    """
    Checks a saved equilibrium against unilateral deviations.

    :param scenario: Scenario the summary was produced from.
    :param summary: Path to summary.json or its parsed contents.
    :param grid_resolution: Points per dimension of the deviation grid. (defaults to twice the scenario's less one)
    :param tolerance: Accepted improvement. (defaults to the scenario's Nash tolerance)
    :return: The deviation report and the metrics run it was checked against.
    """
    report = metrics(scenario)
    game = build_scenario_game(report)
    profile = load_decisions(summary)
    unknown = set(profile) - {terms.key for player in game.players for terms in player.terms}
    if unknown:
        raise ConfigError(f"Summary holds bids for unknown player/path pairs: {sorted(unknown)}")
    nash = verify_nash(game, profile, FTR_TYPES, grid_resolution=grid_resolution, tolerance=tolerance)
    return nash, report


def schema() -> dict:
    """
    JSON Schema of scenario documents.
    """
    return elements.scenario_schema()
