"""Exposes interface for ftrbid."""

import logging

# Add null handler to root logger to avoid "no handler" error when this is used as a library
logging.getLogger().addHandler(logging.NullHandler())


from ftrbid.config import _config as config
from ftrbid.elements import ScenarioConfig, SolverOptions
from ftrbid.network import (
    NetworkModel, DispatchEstimate, SensitivityMatrices, Path,
    build_network, compute_shift_factors, run_dcopf, resolve_paths,
    update_slack_factor, distribution_factor,
)
from ftrbid.risk import RiskMetrics, LoadDeviationModel, compute_risk_metrics
from ftrbid.contribution import (
    OBLIGATION, OPTION, BidDecision, ContributionMetrics,
    compute_contribution_metrics, player_objective,
)
from ftrbid.clearing import Offer, ClearingInstance, ClearingOutcome, build_instance, clear_market
from ftrbid.equilibrium import EquilibriumSolution, NashReport, Game, best_response, iterate_sequential, verify_nash
from ftrbid.kkt import reduce_bilevel, solve_kkt
from ftrbid.report import RunReport
from ftrbid.scenario import load_scenario, run_scenario, emit_tables, builtin_scenarios
from ftrbid.utils.logutil import setup_logging
from ftrbid.core import run, metrics, clear_instance, verify, schema
from ftrbid.exceptions import *


__version__ = "1.0.0"
