"""
FTR auction clearing.

The ISO maximizes bid revenue subject to the simultaneous feasibility test: on every line the
flows implied by the awards must stay within capacity. Obligations count with their signed
impact, options only with the part pushing flow forward.
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import attr
import numpy as np
from scipy.optimize import linprog

from ftrbid.contribution import FTR_TYPES, OBLIGATION, OPTION
from ftrbid.exceptions import InconsistentBoundsError, InfeasibleInstanceError, SolverError
from ftrbid.network import NetworkModel, Path, SensitivityMatrices

logger = logging.getLogger(__name__)

LP_INFEASIBLE = 2

# Tolerance for flagging a line as binding.
BINDING_TOLERANCE = 1e-6


@attr.s(frozen=True, auto_attribs=True)
class Offer:
    """
    Single FTR offer submitted to the auction.

    :var player: Bidding player.
    :var path: Path name.
    :var ftr_type: "obligation" or "option".
    :var price: Bid price (currency/MWh).
    :var quantity_max: Largest quantity the bidder accepts (MW).
    :var quantity_min: Smallest quantity the ISO must award (MW).
    """
    player: str
    path: str
    ftr_type: str = attr.ib(validator=attr.validators.in_(FTR_TYPES))
    price: float
    quantity_max: float
    quantity_min: float = 0.0


@attr.s(frozen=True, auto_attribs=True, eq=False)
class ClearingInstance:
    """
    Auction instance.

    :var offers: Offers, in tie-break order.
    :var impacts: Impact coefficient M per (offer, line).
    :var limits: Capacity per line (MW).
    :var line_ids: Line ids of the columns. (informational)
    :var tie_break: Price bonus per rank favoring earlier offers.
    :var tolerance: LP feasibility tolerance.
    """
    offers: Tuple[Offer, ...]
    impacts: np.ndarray
    limits: np.ndarray
    line_ids: Tuple[int, ...] = ()
    tie_break: float = 1e-6
    tolerance: float = 1e-9

    def __attrs_post_init__(self):
        if self.impacts.shape != (len(self.offers), len(self.limits)):
            raise ValueError(
                f"Impact matrix of shape {self.impacts.shape} doesn't match "
                f"{len(self.offers)} offers and {len(self.limits)} lines."
            )
        for offer in self.offers:
            if offer.quantity_min > offer.quantity_max:
                raise InconsistentBoundsError(
                    f"Offer of {offer.player} on {offer.path} has minimum {offer.quantity_min} "
                    f"above maximum {offer.quantity_max}"
                )

    @property
    def effective_impacts(self) -> np.ndarray:
        """
        Impact rows used in the line constraints: M for obligations, max(0, M) for options.
        """
        is_option = np.array([offer.ftr_type == OPTION for offer in self.offers], dtype=bool)
        return np.where(is_option[:, np.newaxis], np.maximum(self.impacts, 0.0), self.impacts)

    @property
    def effective_prices(self) -> np.ndarray:
        """
        Offer prices with the tie-break bonus added.
        """
        n = len(self.offers)
        prices = np.array([offer.price for offer in self.offers], dtype=float)
        return prices + self.tie_break * (n - np.arange(n))


@attr.s(frozen=True, auto_attribs=True, eq=False)
class ClearingOutcome:
    """
    Auction result.

    :var instance: The cleared instance.
    :var awards: Awarded quantity per offer (MW).
    :var revenue: Σ price * award, without the tie-break bonus.
    :var flows: Flow per line implied by the awards (MW).
    :var line_duals: μ^eq per line, upper side dual minus lower side dual.
    :var upper_line_duals: Duals of the upper side of the line constraints.
    :var lower_line_duals: Duals of the lower side of the line constraints.
    :var upper_duals: μ+ per offer, dual of the quantity maximum.
    :var lower_duals: μ- per offer, dual of the quantity minimum.
    :var binding: Whether each line sits at its limit.
    :var stationarity_residual: Largest |ρ - Hᵀμ^eq - μ+ + μ-|.
    :var complementarity_residual: Largest product of a dual and its constraint slack.
    """
    instance: ClearingInstance
    awards: np.ndarray
    revenue: float
    flows: np.ndarray
    line_duals: np.ndarray
    upper_line_duals: np.ndarray
    lower_line_duals: np.ndarray
    upper_duals: np.ndarray
    lower_duals: np.ndarray
    binding: np.ndarray
    stationarity_residual: float = 0.0
    complementarity_residual: float = 0.0

    def award(self, player: str, path: str, ftr_type: Optional[str] = None) -> float:
        """
        Total award of a player on a path. (optionally of one FTR type only)
        """
        return float(sum(
            award
            for offer, award in zip(self.instance.offers, self.awards)
            if offer.player == player and offer.path == path and (ftr_type is None or offer.ftr_type == ftr_type)
        ))


@attr.s(frozen=True, auto_attribs=True)
class ClearingPrice:
    """
    Market clearing price of a path and FTR type, reported two ways.

    :var path: Path name.
    :var ftr_type: "obligation" or "option".
    :var dual_price: Impact row times the line duals.
    :var weighted_bid: Award-weighted accepted bid. (None without awards)
    """
    path: str
    ftr_type: str
    dual_price: float
    weighted_bid: Optional[float] = None


def build_impact_coefficients(net: NetworkModel, sens: SensitivityMatrices, paths: Sequence[Path]) -> np.ndarray:
    """
    Impact coefficients per (path, line): the flow a 1 MW source -> sink transfer induces on every line.
    """
    if not paths:
        return np.zeros((0, len(net.lines)))
    return np.vstack([sens.ptdf(net, path.source, path.sink) for path in paths])


def build_instance(
        offers: Sequence[Offer],
        path_impacts: Mapping[str, np.ndarray],
        limits: np.ndarray,
        *,
        line_ids: Sequence[int] = (),
        tie_break: float = 1e-6,
        tolerance: float = 1e-9,
) -> ClearingInstance:
    """
    Builds a clearing instance, taking every offer's impact row from its path.
    """
    limits = np.asarray(limits, dtype=float)
    if offers:
        impacts = np.vstack([path_impacts[offer.path] for offer in offers])
    else:
        impacts = np.zeros((0, len(limits)))
    return ClearingInstance(
        offers=tuple(offers),
        impacts=impacts,
        limits=limits,
        line_ids=tuple(line_ids),
        tie_break=tie_break,
        tolerance=tolerance,
    )


def assemble_outcome(
        instance: ClearingInstance,
        awards: np.ndarray,
        upper_line: np.ndarray,
        lower_line: np.ndarray,
        upper: np.ndarray,
        lower: np.ndarray,
) -> ClearingOutcome:
    """
    Outcome of an instance at given awards and duals, with the stationarity and
    complementarity residuals measured there.
    """
    h = instance.effective_impacts
    rho = instance.effective_prices
    flows = h.T @ awards
    line_duals = upper_line - lower_line
    q_max = np.array([offer.quantity_max for offer in instance.offers], dtype=float)
    q_min = np.array([offer.quantity_min for offer in instance.offers], dtype=float)

    stationarity = rho - h @ line_duals - upper + lower
    complementarity = np.concatenate([
        upper_line * (instance.limits - flows),
        lower_line * (instance.limits + flows),
        upper * (q_max - awards),
        lower * (awards - q_min),
    ])
    prices = np.array([offer.price for offer in instance.offers], dtype=float)
    return ClearingOutcome(
        instance=instance,
        awards=awards,
        revenue=float(prices @ awards),
        flows=flows,
        line_duals=line_duals,
        upper_line_duals=upper_line,
        lower_line_duals=lower_line,
        upper_duals=upper,
        lower_duals=lower,
        binding=np.abs(flows) >= instance.limits - BINDING_TOLERANCE,
        stationarity_residual=float(np.max(np.abs(stationarity), initial=0.0)),
        complementarity_residual=float(np.max(np.abs(complementarity), initial=0.0)),
    )


def clear_market(instance: ClearingInstance) -> ClearingOutcome:
    """
    Clears the auction.

    Awards maximize revenue within the line limits. When every offer fits at its maximum with
    nonnegative prices the LP is skipped.

    :raises InfeasibleInstanceError: If the quantity minimums can't be awarded within the limits.
    :raises SolverError: If the LP solver fails otherwise.
    """
    n = len(instance.offers)
    n_line = len(instance.limits)
    zeros_line = np.zeros(n_line)
    if not n:
        return assemble_outcome(instance, np.zeros(0), zeros_line, zeros_line, np.zeros(0), np.zeros(0))

    h = instance.effective_impacts
    rho = instance.effective_prices
    q_max = np.array([offer.quantity_max for offer in instance.offers], dtype=float)
    q_min = np.array([offer.quantity_min for offer in instance.offers], dtype=float)

    # Uncongested
    if np.all(rho >= 0) and np.all(np.abs(h.T @ q_max) <= instance.limits):
        return assemble_outcome(instance, q_max.copy(), zeros_line, zeros_line, rho.copy(), np.zeros(n))

    a_ub = np.vstack([h.T, -h.T])
    b_ub = np.concatenate([instance.limits, instance.limits])
    result = linprog(
        -rho,
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=list(zip(q_min, q_max)),
        method="highs-ds",
        options={
            "primal_feasibility_tolerance": instance.tolerance,
            "dual_feasibility_tolerance": instance.tolerance,
        },
    )
    if result.status == LP_INFEASIBLE:
        raise InfeasibleInstanceError(f"Quantity minimums can't be awarded within the line limits: {result.message}")
    if result.status != 0:
        raise SolverError(f"Clearing failed: {result.message}")

    marginals = -np.asarray(result.ineqlin.marginals, dtype=float)
    awards = np.clip(result.x, q_min, q_max)
    return assemble_outcome(
        instance,
        awards,
        upper_line=np.maximum(marginals[:n_line], 0.0),
        lower_line=np.maximum(marginals[n_line:], 0.0),
        upper=np.maximum(-np.asarray(result.upper.marginals, dtype=float), 0.0),
        lower=np.maximum(np.asarray(result.lower.marginals, dtype=float), 0.0),
    )


def clearing_prices(
        outcome: ClearingOutcome, path_impacts: Mapping[str, np.ndarray], award_tolerance: float = 1e-9
) -> List[ClearingPrice]:
    """
    Clearing price of every path and FTR type: the line duals priced along the path's impact row
    (forward part only for options) and the award-weighted accepted bid.
    """
    prices = []
    for path, row in path_impacts.items():
        for ftr_type in FTR_TYPES:
            h = row if ftr_type == OBLIGATION else np.maximum(row, 0.0)
            awarded = [
                (offer.price, award)
                for offer, award in zip(outcome.instance.offers, outcome.awards)
                if offer.path == path and offer.ftr_type == ftr_type and award > award_tolerance
            ]
            total = sum(award for _, award in awarded)
            weighted = sum(price * award for price, award in awarded) / total if total > 0 else None
            prices.append(ClearingPrice(
                path=path,
                ftr_type=ftr_type,
                dual_price=float(h @ outcome.line_duals),
                weighted_bid=weighted,
            ))
    return prices
