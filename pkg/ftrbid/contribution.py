"""
Player contributions to path flows: shares, share sensitivities, contribution potentials,
FTR quantity bounds and the risk-adjusted profit of a player.
"""
import logging
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from ftrbid import elements
from ftrbid.exceptions import DegenerateWeightsError, InconsistentBoundsError, ZeroPerturbationError
from ftrbid.network import (
    DispatchEstimate,
    NetworkModel,
    Path,
    SensitivityMatrices,
    update_slack_factor,
)
from ftrbid.risk import (
    LoadDeviationModel,
    RedispatchResponse,
    RiskMetrics,
    potential_flows,
    response_matrices,
    worst_case_weights,
)

logger = logging.getLogger(__name__)


OBLIGATION = "obligation"
OPTION = "option"
FTR_TYPES = (OBLIGATION, OPTION)


@attr.s(frozen=True, auto_attribs=True, eq=False)
class ContributionMetrics:
    """
    Contribution of one player to one path, aligned with the monitored line's base flow.

    :var player: Player name.
    :var path: Path name.
    :var share: Estimated share of the flow (MW).
    :var eta_up: Share sensitivity per (generator, load) for the increments.
    :var eta_down: Share sensitivity per (generator, load) for the decrements.
    :var chi_up: Expected share change χ^{d1} per load (MW).
    :var chi_down: Expected share change χ^{d2} per load (MW).
    :var weights: Worst-case load weights w'.
    :var influence: Expected influence v per load (MW).
    :var fcp: Forward contribution potential (MW).
    :var rcp: Reverse contribution potential (MW, not positive).
    :var ftr_min: Smallest FTR quantity the player can justify (MW).
    :var ftr_max: Largest FTR quantity the player can justify (MW).
    :var weights_fallback: Whether uniform weights were substituted.
    """
    player: str
    path: str
    share: float
    eta_up: np.ndarray
    eta_down: np.ndarray
    chi_up: np.ndarray
    chi_down: np.ndarray
    weights: np.ndarray
    influence: np.ndarray
    fcp: float
    rcp: float
    ftr_min: float
    ftr_max: float
    weights_fallback: bool = False


@attr.s(frozen=True, auto_attribs=True)
class BidDecision:
    """
    A player's bid on one path.

    :var player: Player name.
    :var path: Path name.
    :var ftr_type: "obligation" or "option".
    :var price: Bid price (currency/MWh).
    :var quantity: Requested quantity (MW).
    :var award: Quantity awarded by the auction, once cleared (MW).
    """
    player: str
    path: str
    ftr_type: str = attr.ib(validator=attr.validators.in_(FTR_TYPES))
    price: float
    quantity: float
    award: Optional[float] = None

    @property
    def key(self) -> Tuple[str, str]:
        return self.player, self.path

    @property
    def held(self) -> float:
        """Awarded quantity, or the request when not cleared yet."""
        return self.quantity if self.award is None else self.award


def _player_generators(net: NetworkModel, player: elements.Player) -> np.ndarray:
    return np.array([net.generator_index(gen_id) for gen_id in player.generators], dtype=int)


def player_share(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        player: elements.Player,
        line_id: int,
) -> float:
    """
    Player's share of a line flow, Σ D_{l,g} p_g over the player's generators (MW).
    """
    if sens.distribution_factors is None:
        sens = sens.with_dispatch(net, dispatch)
    gens = _player_generators(net, player)
    if not gens.size:
        return 0.0
    row = sens.distribution_factors[net.line_index(line_id)]
    return float(np.dot(row[gens], dispatch.gen_output[gens]))


def share_sensitivity(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        player: elements.Player,
        generator_id: int,
        load_id: int,
        line_id: int,
        delta: float,
) -> float:
    """
    Sensitivity η of a player's share to generator j following load d, as the finite difference
    of the slack distribution factor scaled by the player's output. When j belongs to the player,
    the player's own output moves as well and D_{l,j} is added.

    :raises ZeroPerturbationError: If delta is zero.
    """
    if delta == 0:
        raise ZeroPerturbationError("Share sensitivity needs a nonzero output change.")
    if sens.distribution_factors is None:
        sens = sens.with_dispatch(net, dispatch)

    line = net.line_index(line_id)
    before = sens.slack_factors[line]
    after = update_slack_factor(net, sens, dispatch, line_id, generator_id, load_id, delta)
    output = float(np.sum(dispatch.gen_output[_player_generators(net, player)]))
    eta = (after - before) / delta * output
    if generator_id in player.generators:
        eta += sens.distribution_factors[line, net.generator_index(generator_id)]
    return float(eta)


def expected_share_change(
        eta: Union[np.ndarray, Tuple[np.ndarray, np.ndarray]],
        omega_up: np.ndarray,
        delta_up: np.ndarray,
        delta_down: np.ndarray,
        *,
        aggregate: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Expected share changes χ^{j,d1} = ω+ η ΔP^{d+} and χ^{j,d2} = ω- η ΔP^{d-}.

    :param eta: η per (generator, load), or a pair of them for the increments and decrements.
    :param aggregate: Sum over generators, giving χ^{d1} and χ^{d2} per load.
    """
    if isinstance(eta, tuple):
        eta_up, eta_down = eta
    else:
        eta_up = eta_down = eta
    omega_up = np.asarray(omega_up, dtype=float)
    chi_up = omega_up * np.atleast_2d(eta_up) * np.atleast_2d(delta_up)
    chi_down = (1.0 - omega_up) * np.atleast_2d(eta_down) * np.atleast_2d(delta_down)
    if aggregate:
        return chi_up.sum(axis=0), chi_down.sum(axis=0)
    return chi_up, chi_down


def share_worst_case_weights(
        chi_up: np.ndarray, chi_down: np.ndarray, share: float, *, fallback: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Worst-case weights w' over the loads' expected share changes and the resulting influences
    v^d = w'^d (χ^{d1} + χ^{d2}).

    :raises DegenerateWeightsError: If no load reduces the share and fallback is disabled.
    """
    weights = worst_case_weights(chi_up, chi_down, share, fallback=fallback)
    return weights, weights * (np.asarray(chi_up) + np.asarray(chi_down))


def contribution_potentials(influence: np.ndarray) -> Tuple[float, float]:
    """
    Forward and reverse contribution potentials: sums of positive and negative influences.
    """
    return potential_flows(influence)


def ftr_bounds(share: float, fcp: float, rcp: float) -> Tuple[float, float]:
    """
    Range of FTR quantities a player can justify, [share - |RCP|, share + FCP].

    :raises InconsistentBoundsError: If the bounds cross. (only with a negative FCP)
    """
    low, high = share - abs(rcp), share + fcp
    if low > high:
        raise InconsistentBoundsError(f"FTR lower bound {low} exceeds upper bound {high}")
    return low, high


def signed_ftrs(ftr: float, fcp: float, rcp: float) -> Tuple[float, float]:
    """
    Positive and negative FTR quantities:
    FTR+ = FTR - max(0, FCP - |RCP|) and FTR- = FTR - min(0, FCP - |RCP|).
    """
    net_potential = fcp - abs(rcp)
    return ftr - max(0.0, net_potential), ftr - min(0.0, net_potential)


def risk_adjusted_profit(ftr: float, fcp: float, rcp: float, spread: float, price: float) -> float:
    """
    Profit of holding `ftr` MW bought at `price` against an expected spread, where the potentials
    reduce the quantity earning the spread and increase the quantity paid for.
    """
    positive, negative = signed_ftrs(ftr, fcp, rcp)
    return positive * spread - negative * price


def expected_spread(ftr_type: str, zeta_f: float, spread: float) -> float:
    """
    Spread an FTR type is expected to earn: (2ζf - 1)Δλ for obligations, ζfΔλ for options.
    """
    if ftr_type == OBLIGATION:
        return (2 * zeta_f - 1) * spread
    if ftr_type == OPTION:
        return zeta_f * spread
    raise ValueError(f"Invalid FTR type: {ftr_type}")


def path_profit(decision: BidDecision, contribution: ContributionMetrics, risk: RiskMetrics) -> float:
    """
    Profit of a single bid. Obligations earn nothing unless the flow is more likely to keep its direction.

    Bids holding nothing settle nothing: the potential adjustments of :func:`signed_ftrs` only
    apply to a held FTR, so an unawarded or zero quantity bid is worth 0 rather than
    the -max(0, FCP - |RCP|) * e + min(0, FCP - |RCP|) * price the signed formula gives at 0 MW.
    """
    held = decision.held
    if held <= 0:
        return 0.0
    if decision.ftr_type == OBLIGATION and not risk.obligation_allowed:
        return 0.0
    spread = expected_spread(decision.ftr_type, risk.zeta_f, risk.spread)
    return risk_adjusted_profit(held, contribution.fcp, contribution.rcp, spread, decision.price)


def player_objective(
        decisions: Iterable[BidDecision],
        contributions: Mapping[str, ContributionMetrics],
        risks: Mapping[str, RiskMetrics],
) -> float:
    """
    Total profit of a player's bids over all paths.

    :param decisions: The player's bids.
    :param contributions: The player's contribution metrics keyed by path name.
    :param risks: Risk metrics keyed by path name.
    """
    return float(sum(
        path_profit(decision, contributions[decision.path], risks[decision.path])
        for decision in decisions
    ))


def compute_contribution_metrics(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        player: elements.Player,
        path: Path,
        deviations: LoadDeviationModel,
        responses: Sequence[RedispatchResponse],
) -> ContributionMetrics:
    """
    Runs the contribution pipeline for one player on one path.
    η is evaluated separately for the increment and decrement of each load so line capping is
    respected in each direction. Pairs without an output change contribute nothing.
    """
    if sens.distribution_factors is None:
        sens = sens.with_dispatch(net, dispatch)
    flow = dispatch.line_flow[net.line_index(path.line)]
    direction = -1.0 if flow < 0 else 1.0

    delta_up, delta_down = response_matrices(responses)
    eta_up = np.zeros(delta_up.shape)
    eta_down = np.zeros(delta_down.shape)
    for d, load in enumerate(net.loads):
        for j, generator in enumerate(net.generators):
            for eta, delta in ((eta_up, delta_up), (eta_down, delta_down)):
                if delta[j, d] != 0:
                    eta[j, d] = share_sensitivity(
                        net, sens, dispatch, player, generator.id, load.id, path.line, delta[j, d]
                    )

    share = direction * player_share(net, sens, dispatch, player, path.line)
    chi_up, chi_down = expected_share_change(
        (direction * eta_up, direction * eta_down), deviations.omega_up, delta_up, delta_down
    )

    weights_fallback = False
    try:
        weights, influence = share_worst_case_weights(chi_up, chi_down, share, fallback=False)
    except DegenerateWeightsError:
        logger.debug(f"Player {player.name} on {path.name}: no load reduces the share, using uniform weights.")
        weights = np.full(chi_up.shape, 1.0 / chi_up.size) if chi_up.size else chi_up
        influence = weights * (chi_up + chi_down)
        weights_fallback = True

    fcp, rcp = contribution_potentials(influence)
    ftr_min, ftr_max = ftr_bounds(share, fcp, rcp)
    return ContributionMetrics(
        player=player.name,
        path=path.name,
        share=share,
        eta_up=eta_up,
        eta_down=eta_down,
        chi_up=chi_up,
        chi_down=chi_down,
        weights=weights,
        influence=influence,
        fcp=fcp,
        rcp=rcp,
        ftr_min=ftr_min,
        ftr_max=ftr_max,
        weights_fallback=weights_fallback,
    )


def analyze_players(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        players: Sequence[elements.Player],
        paths: Sequence[Path],
        deviations: LoadDeviationModel,
        responses: Sequence[RedispatchResponse],
) -> Dict[Tuple[str, str], ContributionMetrics]:
    """
    Contribution metrics for every (player, path), keyed by (player name, path name).
    """
    sens = sens.with_dispatch(net, dispatch)
    return {
        (player.name, path.name): compute_contribution_metrics(
            net, sens, dispatch, player, path, deviations, responses
        )
        for player in players
        for path in paths
    }
