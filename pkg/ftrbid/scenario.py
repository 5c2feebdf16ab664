"""
Scenario documents and the end-to-end pipeline: base dispatch, risk and contribution metrics,
the all-obligation and all-option auction states, the equilibrium, its ε-Nash check and the joint solve.
"""
import contextlib
import logging
import os
import pathlib
import time
from importlib import resources
from typing import Dict, List, Optional, Union

import attr
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

import ftrbid
from ftrbid import elements
from ftrbid.clearing import build_impact_coefficients
from ftrbid.contribution import FTR_TYPES, OBLIGATION, OPTION, analyze_players
from ftrbid.equilibrium import (
    EquilibriumSolution,
    Game,
    Key,
    build_game,
    iterate_sequential,
    verify_nash,
)
from ftrbid.exceptions import ConfigError, InfeasibleError, NonconvergenceError
from ftrbid.kkt import reduce_bilevel, solve_kkt
from ftrbid.network import build_network, compute_shift_factors, resolve_paths, run_dcopf
from ftrbid.report import RunReport
from ftrbid.report_writers import CSVWriter
from ftrbid.risk import LoadDeviationModel, analyze_paths, redispatch_all

logger = logging.getLogger(__name__)

yaml = YAML(typ="safe")

SCENARIO_SUFFIXES = (".yml", ".yaml", ".json")


def builtin_scenarios() -> List[str]:
    """
    Names of the scenarios shipped with ftrbid.
    """
    directory = resources.files("ftrbid.config").joinpath("scenarios")
    return sorted(
        entry.name.rsplit(".", 1)[0]
        for entry in directory.iterdir()
        if entry.name.endswith(SCENARIO_SUFFIXES)
    )


def _read_document(path: pathlib.Path) -> dict:
    try:
        with open(path, "r") as fo:
            document = yaml.load(fo)
    except YAMLError as e:
        raise ConfigError(f"Error parsing scenario {path}: {e}")
    except OSError as e:
        raise ConfigError(f"Unable to read scenario {path}: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"Scenario {path} must contain a mapping.")
    return document


def _resolve(path_or_name: Union[str, pathlib.Path]) -> pathlib.Path:
    path = pathlib.Path(path_or_name)
    if path.exists():
        return path
    if str(path_or_name) in builtin_scenarios():
        for suffix in SCENARIO_SUFFIXES:
            candidate = resources.files("ftrbid.config").joinpath("scenarios").joinpath(f"{path_or_name}{suffix}")
            if candidate.is_file():
                return pathlib.Path(str(candidate))
    raise ConfigError(f"Scenario {path_or_name} is neither a file nor one of {builtin_scenarios()}")


def load_document(path_or_name: Union[str, pathlib.Path], solver_overrides: Optional[dict] = None) -> dict:
    """
    Reads a scenario document, pulling in a referenced network document and layering
    solver options: configuration file defaults, then the scenario, then `solver_overrides`.
    """
    path = _resolve(path_or_name)
    document = _read_document(path)

    network = document.pop("network", None)
    if network:
        network_path = pathlib.Path(network)
        if not network_path.is_absolute():
            network_path = path.parent / network_path
        for key, value in _read_document(network_path).items():
            document.setdefault(key, value)

    solver = dict(ftrbid.config.solver_defaults)
    solver.update(document.get("solver") or {})
    solver.update({key: value for key, value in (solver_overrides or {}).items() if value is not None})
    document["solver"] = solver
    return document


def load_scenario(
        path_or_name: Union[str, pathlib.Path], solver_overrides: Optional[dict] = None
) -> elements.ScenarioConfig:
    """
    Loads and validates a scenario document from a file or a builtin scenario name.

    :param path_or_name: YAML or JSON scenario file, or a builtin scenario name.
    :param solver_overrides: Solver options taking precedence over the document's.
    :raises ConfigError: If the document can't be read.
    :raises SchemaError: If the document is malformed.
    """
    document = load_document(path_or_name, solver_overrides)
    elements.validate_document(document)
    config = elements.ScenarioConfig.from_dict(document)
    logger.debug(f"Loaded scenario {config.name} from {path_or_name}")
    return config


@contextlib.contextmanager
def _stage(report: RunReport, name: str):
    """
    Labels and times a pipeline stage. Exceptions escaping the stage carry its name.
    """
    report.stage = name
    logger.info(f"Stage {name} started.")
    started = time.perf_counter()
    try:
        yield
    except Exception as e:
        logger.error(f"Stage {name} failed: {e}")
        e.stage = name
        raise
    finally:
        report.timings[name] = time.perf_counter() - started
    logger.info(f"Stage {name} finished in {report.timings[name]:.3f}s")


def select_types(
        game: Game, obligation_state: EquilibriumSolution, option_state: EquilibriumSolution
) -> Dict[Key, str]:
    """
    Per (player, path), the FTR type with the larger profit across the two states.
    Ties go to obligations. Pairs bidding in neither state are left out.
    """
    selection = {}
    for player in game.players:
        for terms in player.terms:
            obligation = obligation_state.result(*terms.key)
            option = option_state.result(*terms.key)
            if obligation is None and option is None:
                continue
            if option is None or (obligation is not None and obligation.profit >= option.profit):
                selection[terms.key] = OBLIGATION
            else:
                selection[terms.key] = OPTION
    return selection


def _selected_profile(
        obligation_state: EquilibriumSolution, option_state: EquilibriumSolution, selection: Dict[Key, str]
) -> dict:
    obligations = obligation_state.profile()
    options = option_state.profile()
    return {
        key: (obligations if ftr_type == OBLIGATION else options)[key]
        for key, ftr_type in selection.items()
    }


def run_scenario(config: elements.ScenarioConfig, *, metrics_only: bool = False) -> RunReport:
    """
    Runs the full pipeline on a scenario.

    :param config: The scenario.
    :param metrics_only: Stop after the risk and contribution metrics.
    :return: RunReport with every stage's results.
    :raises FTRBidError: Errors of a stage, with the stage name set as `stage`.
    """
    options = config.solver
    with RunReport(config) as report:
        with _stage(report, "network"):
            net = build_network(config)
            sens = compute_shift_factors(net)
            report.network = net

        with _stage(report, "dispatch"):
            dispatch = run_dcopf(net, tolerance=options.lp_tolerance)
            paths = resolve_paths(net, sens, dispatch, config.paths)
            dispatch = dispatch.with_paths(net, paths)
            sens = sens.with_dispatch(net, dispatch)
            report.dispatch = dispatch
            report.sensitivities = sens
            report.paths = paths
            if dispatch.degenerate:
                logger.warning("Base dispatch is degenerate, nodal prices may not be unique.")

        with _stage(report, "redispatch"):
            deviations = LoadDeviationModel.from_network(net, config.deviation_fraction)
            responses = redispatch_all(net, dispatch, deviations, tolerance=options.lp_tolerance)

        with _stage(report, "risk"):
            report.risks = analyze_paths(net, sens, dispatch, paths, deviations, responses)

        with _stage(report, "contribution"):
            report.contributions = analyze_players(net, sens, dispatch, config.players, paths, deviations, responses)
            report.path_impacts = dict(zip(
                (path.name for path in paths), build_impact_coefficients(net, sens, paths)
            ))

        if metrics_only:
            report.stage = None
            return report

        game = build_game(
            report.contributions,
            report.risks,
            config.players,
            report.path_impacts,
            net.capacity,
            line_ids=[line.id for line in net.lines],
            options=options,
        )

        with _stage(report, "obligation_state"):
            report.obligation_state = iterate_sequential(game, game.initial_profile([OBLIGATION]), [OBLIGATION])

        with _stage(report, "option_state"):
            report.option_state = iterate_sequential(game, game.initial_profile([OPTION]), [OPTION])

        with _stage(report, "equilibrium"):
            report.selection = select_types(game, report.obligation_state, report.option_state)
            initial = _selected_profile(report.obligation_state, report.option_state, report.selection)
            equilibrium = iterate_sequential(game, initial, FTR_TYPES)

        with _stage(report, "verification"):
            nash = verify_nash(game, equilibrium.profile(), FTR_TYPES)
            report.equilibrium = attr.evolve(equilibrium, nash=nash)

        if options.solve_kkt:
            with _stage(report, "joint"):
                profile = equilibrium.profile()
                system = reduce_bilevel(game, {key: decision.ftr_type for key, decision in profile.items()})
                try:
                    report.joint = solve_kkt(system, options, warm_start=profile)
                except NonconvergenceError as e:
                    logger.warning(f"Joint solve didn't converge: {e}")
                    report.joint = e.solution
                    report.joint_error = str(e)
                except InfeasibleError as e:
                    logger.warning(f"Joint solve skipped: {e}")
                    report.joint_error = str(e)
            if report.joint_agrees is False:
                logger.info("Joint solution and best response equilibrium give different profits.")

        report.stage = None
    return report


def emit_tables(report: RunReport, directory: Union[str, pathlib.Path, None] = None) -> List[pathlib.Path]:
    """
    Writes the report's tables as CSV files together with summary.json.

    :param directory: Output directory. (defaults to FTRBID_OUTPUT_DIR, then the scenario's
        output_dir, then the configured OUTPUT_DIR, then the current directory)
    :return: Written files.
    """
    directory = (
        directory
        or os.environ.get("FTRBID_OUTPUT_DIR")
        or report.config.output_dir
        or ftrbid.config.get("OUTPUT_DIR")
        or "."
    )
    written = CSVWriter(directory).write(report)
    logger.info(f"Wrote {len(written)} files to {directory}")
    return written
