"""
Interface for the RunReport class.
"""
import io
import json
import logging
import math
import weakref
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas

from ftrbid import elements
from ftrbid.clearing import clearing_prices
from ftrbid.contribution import OBLIGATION, OPTION, ContributionMetrics
from ftrbid.equilibrium import EquilibriumSolution, Key
from ftrbid.network import DispatchEstimate, NetworkModel, Path, SensitivityMatrices
from ftrbid.report_writers import WRITERS
from ftrbid.risk import RiskMetrics
from ftrbid.utils import logutil

logger = logging.getLogger(__name__)


TABLE_COLUMNS = {
    "table_zeta": [
        "path", "line", "source", "sink", "p_est", "spread", "fpf", "rpf",
        "zeta_f", "zeta_r", "obligation_cap", "option_cap",
    ],
    "table_fcp_rcp": ["player", "path", "share", "fcp", "rcp", "ftr_min", "ftr_max"],
    "table_profits": ["player", "path", "profit_obligation", "profit_option", "selected"],
    "table_bids": ["player", "path", "bid_obligation", "bid_option"],
    "table_mcp": ["path", "ftr_type", "dual_price", "weighted_bid"],
    "table_ftrs": ["player", "path", "ftr_obligation", "ftr_option"],
}


class ReportLogHandler(logging.Handler):
    """
    Custom logging handler used to record log messages into the RunReport.
    """

    def __init__(self, report: "RunReport"):
        super().__init__()
        self._report_ref = weakref.ref(report)

    def emit(self, record):
        if report := self._report_ref():
            message = self.format(record)
            report.logs.append(message)
            if record.levelno >= logging.ERROR:
                report.errors.append(message)


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return None
    return float(value)


def _solution_dict(solution: Optional[EquilibriumSolution]) -> Optional[dict]:
    if solution is None:
        return None
    return {
        "status": solution.status,
        "rounds": solution.rounds,
        "objective": solution.objective,
        "player_profits": dict(solution.player_profits),
        "residuals": {name: _finite(value) for name, value in solution.residuals.items()},
        "decisions": [elements.cattr.unstructure(result) for result in solution.results],
        "nash": elements.cattr.unstructure(solution.nash) if solution.nash else None,
    }


class RunReport:
    """
    Collects everything a scenario run produces and renders it as tables.

    :param config: Scenario being run.
    :param log_level: Logging level collected into the report.
        (Defaults to currently set effective log level)
    :param log_filter: Custom filter for the collected logs.
    """

    def __init__(
            self,
            config: elements.ScenarioConfig,
            *,
            log_level: int = None,
            log_filter: logging.Filter = None,
    ):
        self.config = config
        self.logs: List[str] = []
        self.errors: List[str] = []
        self.timings: Dict[str, float] = {}
        self.stage: Optional[str] = None

        self.network: Optional[NetworkModel] = None
        self.sensitivities: Optional[SensitivityMatrices] = None
        self.dispatch: Optional[DispatchEstimate] = None
        self.paths: Tuple[Path, ...] = ()
        self.risks: Dict[str, RiskMetrics] = {}
        self.contributions: Dict[Key, ContributionMetrics] = {}
        self.path_impacts: Dict[str, np.ndarray] = {}

        self.obligation_state: Optional[EquilibriumSolution] = None
        self.option_state: Optional[EquilibriumSolution] = None
        self.selection: Dict[Key, str] = {}
        self.equilibrium: Optional[EquilibriumSolution] = None
        self.joint: Optional[EquilibriumSolution] = None
        self.joint_error: Optional[str] = None

        # Setup a simple format that doesn't contain any runtime variables.
        log_handler = ReportLogHandler(self)
        log_handler.addFilter(logutil.LevelCharFilter())
        log_handler.setFormatter(logging.Formatter("[%(level_char)s] %(message)s"))
        if log_level is not None:
            log_handler.setLevel(log_level)
        if log_filter is not None:
            log_handler.addFilter(log_filter)
        self._log_handler = log_handler

    def __enter__(self):
        logging.root.addHandler(self._log_handler)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        logging.root.removeHandler(self._log_handler)

    @property
    def player_names(self) -> List[str]:
        return [player.name for player in self.config.players]

    @property
    def keys(self) -> List[Key]:
        return [(player, path.name) for player in self.player_names for path in self.paths]

    @property
    def joint_agrees(self) -> Optional[bool]:
        """
        Whether the joint solution and the best response equilibrium give every player the same profit.
        """
        if self.joint is None or self.equilibrium is None:
            return None
        tolerance = self.config.solver.nash_tolerance
        return all(
            abs(self.joint.player_profits[name] - self.equilibrium.player_profits[name]) <= tolerance
            for name in self.player_names
        )

    @property
    def converged(self) -> bool:
        """
        Whether every solver stage met its tolerances.
        """
        if self.equilibrium is None:
            return True
        if not self.equilibrium.converged or self.joint_error:
            return False
        return self.equilibrium.nash is None or self.equilibrium.nash.certified

    @property
    def status(self) -> str:
        if self.equilibrium is None:
            return "metrics" if self.risks else "incomplete"
        return "converged" if self.converged else "nonconverged"

    def _frame(self, name: str, rows: List[list]) -> pandas.DataFrame:
        return pandas.DataFrame(rows, columns=TABLE_COLUMNS[name])

    def table_zeta(self) -> pandas.DataFrame:
        rows = []
        for path in self.paths:
            risk = self.risks[path.name]
            rows.append([
                path.name, path.line, path.source, path.sink, risk.p_est, risk.spread, risk.fpf, risk.rpf,
                risk.zeta_f, risk.zeta_r, risk.obligation_cap, risk.option_cap,
            ])
        return self._frame("table_zeta", rows)

    def table_fcp_rcp(self) -> pandas.DataFrame:
        rows = []
        for key in self.keys:
            metrics = self.contributions[key]
            rows.append([*key, metrics.share, metrics.fcp, metrics.rcp, metrics.ftr_min, metrics.ftr_max])
        return self._frame("table_fcp_rcp", rows)

    def _state_value(self, state: Optional[EquilibriumSolution], key: Key, field: str, default=np.nan) -> float:
        if state is None:
            return default
        result = state.result(*key)
        if result is None:
            return default
        if field == "profit":
            return result.profit
        if field == "price":
            return result.decision.price
        return result.decision.award

    def table_profits(self) -> pandas.DataFrame:
        rows = []
        if self.obligation_state or self.option_state:
            for key in self.keys:
                rows.append([
                    *key,
                    self._state_value(self.obligation_state, key, "profit", 0.0),
                    self._state_value(self.option_state, key, "profit", 0.0),
                    self.selection.get(key, ""),
                ])
        return self._frame("table_profits", rows)

    def table_bids(self) -> pandas.DataFrame:
        rows = []
        if self.obligation_state or self.option_state:
            for key in self.keys:
                rows.append([
                    *key,
                    self._state_value(self.obligation_state, key, "price"),
                    self._state_value(self.option_state, key, "price"),
                ])
        return self._frame("table_bids", rows)

    def table_mcp(self) -> pandas.DataFrame:
        rows = []
        for ftr_type, state in ((OBLIGATION, self.obligation_state), (OPTION, self.option_state)):
            if state is None:
                continue
            for price in clearing_prices(state.outcome, self.path_impacts):
                if price.ftr_type == ftr_type:
                    weighted = np.nan if price.weighted_bid is None else price.weighted_bid
                    rows.append([price.path, price.ftr_type, price.dual_price, weighted])
        rows.sort(key=lambda row: ([path.name for path in self.paths].index(row[0]), row[1] != OBLIGATION))
        return self._frame("table_mcp", rows)

    def table_ftrs(self) -> pandas.DataFrame:
        rows = []
        if self.obligation_state or self.option_state:
            for key in self.keys:
                rows.append([
                    *key,
                    self._state_value(self.obligation_state, key, "award", 0.0),
                    self._state_value(self.option_state, key, "award", 0.0),
                ])
        return self._frame("table_ftrs", rows)

    @property
    def tables(self) -> Dict[str, pandas.DataFrame]:
        return {
            "table_zeta": self.table_zeta(),
            "table_fcp_rcp": self.table_fcp_rcp(),
            "table_profits": self.table_profits(),
            "table_bids": self.table_bids(),
            "table_mcp": self.table_mcp(),
            "table_ftrs": self.table_ftrs(),
        }

    def as_dict(self) -> dict:
        """
        Machine readable summary of the run.
        """
        summary = {
            "scenario": self.config.name,
            "status": self.status,
            "stage": self.stage,
            "solver": self.config.solver.as_dict(),
        }
        if self.network:
            summary["network"] = {
                "buses": len(self.network.buses),
                "lines": len(self.network.lines),
                "generators": len(self.network.generators),
                "loads": len(self.network.loads),
                "slack_bus": self.network.slack_bus,
            }
        if self.dispatch:
            summary["dispatch"] = {
                "cost": self.dispatch.cost,
                "degenerate": self.dispatch.degenerate,
                "gen_output": self.dispatch.gen_output.tolist(),
                "line_flow": self.dispatch.line_flow.tolist(),
                "nodal_price": self.dispatch.nodal_price.tolist(),
                "path_spread": dict(self.dispatch.path_spread),
            }
        summary["states"] = {
            OBLIGATION: _solution_dict(self.obligation_state),
            OPTION: _solution_dict(self.option_state),
        }
        summary["selection"] = [
            {"player": player, "path": path, "ftr_type": ftr_type}
            for (player, path), ftr_type in self.selection.items()
        ]
        summary["equilibrium"] = _solution_dict(self.equilibrium)
        summary["joint"] = _solution_dict(self.joint)
        summary["joint_agrees"] = self.joint_agrees
        summary["joint_error"] = self.joint_error
        summary["timings"] = dict(self.timings)
        summary["logs"] = list(self.logs)
        summary["errors"] = list(self.errors)
        return summary

    def as_json(self) -> str:
        return json.dumps(self.as_dict(), indent=4)

    def as_text(self, format="simple") -> str:
        """
        Renders the report as text.

        :param format: "simple", "markdown" or "json"
        """
        if format == "json":
            return self.as_json()
        try:
            writer_class = WRITERS[format]
        except KeyError:
            raise ValueError(f"Invalid format {format}")
        stream = io.StringIO()
        writer_class(stream).write(self)
        return stream.getvalue()

    def as_markdown(self) -> str:
        return self.as_text("markdown")
