"""
Per path risk pipeline: load deviation sensitivities, worst-case load weights,
forward/reverse potential flows, chance coefficients, bid caps and the decision function.
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import attr
import numpy as np

from ftrbid.exceptions import DegenerateChanceError, DegenerateWeightsError, InfeasibleDispatchError, SchemaError
from ftrbid.network import (
    DispatchEstimate,
    NetworkModel,
    Path,
    SensitivityMatrices,
    run_dcopf,
)

logger = logging.getLogger(__name__)

# Tolerance used for the redispatch balance check.
BALANCE_TOLERANCE = 1e-6


@attr.s(frozen=True, auto_attribs=True, eq=False)
class LoadDeviationModel:
    """
    Two-point deviation model of every load.

    :var deviation: Deviation magnitude ΔD per load (MW).
    :var omega_up: Probability of an increment per load.
    """
    deviation: np.ndarray
    omega_up: np.ndarray

    def __attrs_post_init__(self):
        if self.deviation.shape != self.omega_up.shape:
            raise SchemaError("Deviation and probability vectors must have the same length.")
        if np.any(self.deviation < 0):
            raise SchemaError("Load deviations must not be negative.")
        if np.any((self.omega_up < 0) | (self.omega_up > 1)):
            raise SchemaError("Load deviation probabilities must be within [0, 1].")

    @property
    def omega_down(self) -> np.ndarray:
        return 1.0 - self.omega_up

    @classmethod
    def from_network(cls, net: NetworkModel, fraction: float = 0.10) -> "LoadDeviationModel":
        """
        Builds the model from the loads' own settings, defaulting deviations to a fraction of demand.
        """
        if not 0 < fraction < 1:
            raise SchemaError(f"Deviation fraction must be within (0, 1), got {fraction}")
        deviation = [
            load.deviation if load.deviation is not None else fraction * load.demand
            for load in net.loads
        ]
        return cls(
            deviation=np.array(deviation, dtype=float),
            omega_up=np.array([load.omega_up for load in net.loads], dtype=float),
        )


@attr.s(frozen=True, auto_attribs=True, eq=False)
class RedispatchResponse:
    """
    Generator output changes after a single load deviates.

    :var load: Id of the deviating load.
    :var deviation: Deviation magnitude ΔD (MW).
    :var delta_up: ΔP_j per generator for the increment (MW).
    :var delta_down: ΔP_j per generator for the decrement (MW).
    """
    load: int
    deviation: float
    delta_up: np.ndarray
    delta_down: np.ndarray

    @property
    def balance_error(self) -> float:
        """Largest deviation from Σ ΔP = ±ΔD over both directions."""
        return max(
            abs(float(np.sum(self.delta_up)) - self.deviation),
            abs(float(np.sum(self.delta_down)) + self.deviation),
        )


@attr.s(frozen=True, auto_attribs=True, eq=False)
class RiskMetrics:
    """
    Risk metrics of a single path.

    Terms are stored in the monitored line's from -> to frame, flow quantities in the
    direction of the base flow.

    :var path: The path.
    :var p_est: Estimated flow measured along the path (MW).
    :var spread: Estimated price spread λ_sink - λ_source (currency/MWh).
    :var direction: Sign of the base flow of the monitored line. (+1 for zero flow)
    :var l_up: l^{d1} per load (MW).
    :var l_down: l^{d2} per load (MW).
    :var weights: Worst-case load weights.
    :var effects: Expected effect φ' per load, flow aligned (MW).
    :var sensitivity: Expected sensitivity ψ ΔD w per (generator, load). (diagnostic only)
    :var fpf: Forward potential flow (MW).
    :var rpf: Reverse potential flow (MW, not positive).
    :var zeta_f: Chance the flow keeps its direction.
    :var zeta_r: Chance the flow reverses.
    :var obligation_cap: Obligation bid cap (2ζ - 1)Δλ.
    :var option_cap: Option bid cap ζΔλ.
    :var weights_fallback: Whether uniform weights were substituted.
    :var chance_fallback: Whether the chance coefficients defaulted to 0.5.
    """
    path: Path
    p_est: float
    spread: float
    direction: float
    l_up: np.ndarray
    l_down: np.ndarray
    weights: np.ndarray
    effects: np.ndarray
    sensitivity: np.ndarray
    fpf: float
    rpf: float
    zeta_f: float
    zeta_r: float
    obligation_cap: float
    option_cap: float
    weights_fallback: bool = False
    chance_fallback: bool = False

    @property
    def obligation_allowed(self) -> bool:
        return self.zeta_f > self.zeta_r


def line_sensitivity(
        net: NetworkModel, sens: SensitivityMatrices, generator_id: int, load_id: int, line_id: int
) -> float:
    """
    Sensitivity ψ = A_j - A_d of a line flow while generator j serves load d.
    """
    line = net.line_index(line_id)
    gen_bus = net.bus_index(net.generators[net.generator_index(generator_id)].bus)
    load_bus = net.bus_index(net.loads[net.load_index(load_id)].bus)
    return float(sens.shift_factors[line, gen_bus] - sens.shift_factors[line, load_bus])


def line_sensitivities(net: NetworkModel, sens: SensitivityMatrices, line_id: int) -> np.ndarray:
    """
    ψ for every (generator, load) pair on one line.
    """
    row = sens.shift_factors[net.line_index(line_id)]
    return row[net.generator_buses][:, np.newaxis] - row[net.load_buses][np.newaxis, :]


def redispatch_response(
        net: NetworkModel,
        dispatch: DispatchEstimate,
        load_id: int,
        deviation: float,
        *,
        tolerance: float = 1e-9,
) -> RedispatchResponse:
    """
    Re-solves the DCOPF with one load moved up and down by `deviation` MW
    and reports each generator's output change against the base dispatch.

    :raises InfeasibleDispatchError: If either perturbed dispatch is infeasible.
    """
    n_gen = len(net.generators)
    if deviation == 0:
        return RedispatchResponse(load=load_id, deviation=0.0, delta_up=np.zeros(n_gen), delta_down=np.zeros(n_gen))

    index = net.load_index(load_id)
    deltas = []
    for sign in (1.0, -1.0):
        demand = dispatch.demand.copy()
        demand[index] += sign * deviation
        try:
            perturbed = run_dcopf(net, demand, tolerance=tolerance)
        except InfeasibleDispatchError as e:
            direction = "increment" if sign > 0 else "decrement"
            raise InfeasibleDispatchError(f"Load {load_id} {direction} of {deviation} MW: {e}")
        deltas.append(perturbed.gen_output - dispatch.gen_output)

    response = RedispatchResponse(load=load_id, deviation=float(deviation), delta_up=deltas[0], delta_down=deltas[1])
    if response.balance_error > BALANCE_TOLERANCE:
        logger.warning(f"Redispatch for load {load_id} is off balance by {response.balance_error:.3g} MW")
    return response


def redispatch_all(
        net: NetworkModel, dispatch: DispatchEstimate, deviations: LoadDeviationModel, *, tolerance: float = 1e-9
) -> Tuple[RedispatchResponse, ...]:
    """
    Redispatch responses for every load, in load order.
    """
    return tuple(
        redispatch_response(net, dispatch, load.id, deviation, tolerance=tolerance)
        for load, deviation in zip(net.loads, deviations.deviation)
    )


def response_matrices(responses: Sequence[RedispatchResponse]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stacks responses into (generator, load) matrices of ΔP^{d+} and ΔP^{d-}.
    """
    if not responses:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return (
        np.column_stack([response.delta_up for response in responses]),
        np.column_stack([response.delta_down for response in responses]),
    )


def load_effect_terms(
        psi: np.ndarray, delta_up: np.ndarray, delta_down: np.ndarray, omega_up: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per load effect terms l^{d1} = Σ_j ω+ ψ ΔP^{d+} and l^{d2} = Σ_j ω- ψ ΔP^{d-}.

    :param psi: ψ per (generator, load).
    :param delta_up: ΔP^{d+} per (generator, load).
    :param delta_down: ΔP^{d-} per (generator, load).
    :param omega_up: ω+ per load.
    """
    psi = np.atleast_2d(psi)
    omega_up = np.asarray(omega_up, dtype=float)
    l_up = omega_up * np.sum(psi * np.atleast_2d(delta_up), axis=0)
    l_down = (1.0 - omega_up) * np.sum(psi * np.atleast_2d(delta_down), axis=0)
    return l_up, l_down


def worst_case_weights(
        l_up: np.ndarray, l_down: np.ndarray, p_est: float, *, fallback: bool = True
) -> np.ndarray:
    """
    Worst-case load weights.
    Loads pushing the flow against its direction get weights proportional to that adverse part:
    negative parts for p_est >= 0 and positive parts for p_est < 0.

    :param fallback: Return uniform weights when there are no adverse terms instead of raising.
    :raises DegenerateWeightsError: If there are no adverse terms and fallback is disabled.
    """
    l_up = np.asarray(l_up, dtype=float)
    l_down = np.asarray(l_down, dtype=float)
    if p_est >= 0:
        adverse = np.minimum(l_up, 0.0) + np.minimum(l_down, 0.0)
    else:
        adverse = np.maximum(l_up, 0.0) + np.maximum(l_down, 0.0)

    total = adverse.sum()
    if adverse.size and total != 0:
        return adverse / total

    if not fallback:
        raise DegenerateWeightsError("No load has an adverse effect.")
    logger.warning("No load has an adverse effect, using uniform weights.")
    if not adverse.size:
        return adverse
    return np.full(adverse.shape, 1.0 / adverse.size)


def expected_sensitivity(psi: np.ndarray, deviation: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Expected sensitivity ψ ΔD_d w^d per (generator, load).
    """
    return np.atleast_2d(psi) * np.asarray(deviation)[np.newaxis, :] * np.asarray(weights)[np.newaxis, :]


def potential_flows(effects: np.ndarray) -> Tuple[float, float]:
    """
    Splits expected effects by sign.

    :return: (sum of positive effects, sum of negative effects)
    """
    effects = np.asarray(effects, dtype=float)
    return float(effects[effects > 0].sum()), float(effects[effects < 0].sum())


def chance_coefficients(p_est: float, fpf: float, rpf: float) -> Tuple[float, float]:
    """
    Chance coefficients ζf = (FPF + p_est) / (FPF + p_est + |RPF|) and ζr = |RPF| / (same).

    :raises DegenerateChanceError: If the denominator isn't positive.
    """
    denominator = fpf + p_est + abs(rpf)
    if denominator <= 0:
        raise DegenerateChanceError(f"Chance coefficient denominator must be positive, got {denominator}")
    return (fpf + p_est) / denominator, abs(rpf) / denominator


def bid_caps(zeta_f: float, spread: float) -> Tuple[float, float]:
    """
    Bid caps (2ζf - 1)Δλ for obligations and ζfΔλ for options.
    """
    return (2 * zeta_f - 1) * spread, zeta_f * spread


def decision_function(
        zeta_f: float,
        spread: float,
        price_obligation: float,
        price_option: float,
        quantity_obligation: float,
        quantity_option: float,
) -> float:
    """
    Expected rent of an obligation and option bid pair.
    Zero at the caps, positive for bids strictly below the caps.
    """
    obligation_cap, option_cap = bid_caps(zeta_f, spread)
    return (obligation_cap - price_obligation) * quantity_obligation + (option_cap - price_option) * quantity_option


def compute_risk_metrics(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        path: Path,
        deviations: LoadDeviationModel,
        responses: Sequence[RedispatchResponse],
        *,
        spread: Optional[float] = None,
) -> RiskMetrics:
    """
    Runs the risk pipeline for one path.
    The terms are aligned with the base flow so FPF >= 0 >= RPF holds for either flow direction.
    """
    flow = float(dispatch.line_flow[net.line_index(path.line)])
    direction = -1.0 if flow < 0 else 1.0
    if spread is None:
        spread = dispatch.spread(net, path.source, path.sink)

    psi = line_sensitivities(net, sens, path.line)
    delta_up, delta_down = response_matrices(responses)
    l_up, l_down = load_effect_terms(psi, delta_up, delta_down, deviations.omega_up)

    weights_fallback = False
    try:
        weights = worst_case_weights(direction * l_up, direction * l_down, abs(flow), fallback=False)
    except DegenerateWeightsError:
        logger.warning(f"Path {path.name}: no load has an adverse effect, using uniform weights.")
        weights = np.full(l_up.shape, 1.0 / l_up.size) if l_up.size else l_up
        weights_fallback = True

    effects = weights * direction * (l_up + l_down)
    fpf, rpf = potential_flows(effects)

    chance_fallback = False
    try:
        zeta_f, zeta_r = chance_coefficients(abs(flow), fpf, rpf)
    except DegenerateChanceError:
        logger.warning(f"Path {path.name}: no flow and no deviation effect, using even chance coefficients.")
        zeta_f = zeta_r = 0.5
        chance_fallback = True

    obligation_cap, option_cap = bid_caps(zeta_f, spread)
    metrics = RiskMetrics(
        path=path,
        p_est=path.orientation * flow,
        spread=spread,
        direction=direction,
        l_up=l_up,
        l_down=l_down,
        weights=weights,
        effects=effects,
        sensitivity=expected_sensitivity(psi, deviations.deviation, weights),
        fpf=fpf,
        rpf=rpf,
        zeta_f=zeta_f,
        zeta_r=zeta_r,
        obligation_cap=obligation_cap,
        option_cap=option_cap,
        weights_fallback=weights_fallback,
        chance_fallback=chance_fallback,
    )
    logger.debug(
        f"Path {path.name}: p_est={metrics.p_est:.4f} spread={spread:.4f} "
        f"FPF={fpf:.4f} RPF={rpf:.4f} zeta_f={zeta_f:.4f}"
    )
    return metrics


def analyze_paths(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        paths: Sequence[Path],
        deviations: LoadDeviationModel,
        responses: Sequence[RedispatchResponse],
) -> Dict[str, RiskMetrics]:
    """
    Risk metrics for every path, keyed by path name in path order.
    """
    return {
        path.name: compute_risk_metrics(net, sens, dispatch, path, deviations, responses)
        for path in paths
    }
