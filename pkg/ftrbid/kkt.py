"""
Single level reduction of the players' bilevel problems.

The auction's optimality conditions (primal feasibility, stationarity, complementary slackness)
are embedded into the joint profit maximization of all players. Complementarity is relaxed to
products <= τ and tightened stage by stage, each stage solved with scipy's trust-constr
interior point method.
"""
import logging
import warnings
from typing import List, Mapping, Optional, Tuple

import attr
import numpy as np
from scipy.optimize import Bounds, LinearConstraint, NonlinearConstraint, minimize

from ftrbid import elements
from ftrbid.clearing import ClearingOutcome, Offer, assemble_outcome, build_instance
from ftrbid.contribution import OPTION, BidDecision, expected_spread
from ftrbid.equilibrium import JOINT, EquilibriumSolution, Game, Key
from ftrbid.exceptions import (
    InconsistentBoundsError,
    InfeasibleError,
    InfeasibleInstanceError,
    NonconvergenceError,
)

logger = logging.getLogger(__name__)

# Starting bids this close to a band edge are cleared on it.
SNAP_TOLERANCE = 1e-6

# Starting multiplier value.
MULTIPLIER_START = 1e-2


@attr.s(frozen=True, auto_attribs=True, eq=False)
class KktSystem:
    """
    Single level program over z = [ρ, x, μ+, μ-, ν+, ν-].

    :var game: Game the system was reduced from.
    :var keys: (player, path) of every offer.
    :var ftr_types: FTR type of every offer.
    :var spreads: Expected spread e of every offer.
    :var price_low: Lower band edge of every offer.
    :var price_high: Upper band edge of every offer.
    :var upper: Award upper bound (ftr_max) of every offer.
    :var lower: Award lower bound max(0, ftr_min) of every offer.
    :var potential_plus: max(0, FCP - |RCP|) of every offer.
    :var potential_minus: min(0, FCP - |RCP|) of every offer.
    :var impacts: Effective impact coefficients per (offer, line).
    :var limits: Capacity per line.
    :var tie_offsets: Tie-break bonus of every offer.
    """
    game: Game
    keys: Tuple[Key, ...]
    ftr_types: Tuple[str, ...]
    spreads: np.ndarray
    price_low: np.ndarray
    price_high: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    potential_plus: np.ndarray
    potential_minus: np.ndarray
    impacts: np.ndarray
    limits: np.ndarray
    tie_offsets: np.ndarray

    @property
    def n(self) -> int:
        return len(self.keys)

    @property
    def n_line(self) -> int:
        return len(self.limits)

    @property
    def size(self) -> int:
        return 4 * self.n + 2 * self.n_line

    @property
    def rho(self) -> slice:
        return slice(0, self.n)

    @property
    def x(self) -> slice:
        return slice(self.n, 2 * self.n)

    @property
    def mu_upper(self) -> slice:
        return slice(2 * self.n, 3 * self.n)

    @property
    def mu_lower(self) -> slice:
        return slice(3 * self.n, 4 * self.n)

    @property
    def nu_upper(self) -> slice:
        return slice(4 * self.n, 4 * self.n + self.n_line)

    @property
    def nu_lower(self) -> slice:
        return slice(4 * self.n + self.n_line, self.size)

    # Joint objective, negated for minimization.

    def objective(self, z: np.ndarray) -> float:
        rho, x = z[self.rho], z[self.x]
        return -float(np.sum((self.spreads - rho) * x + rho * self.potential_minus - self.spreads * self.potential_plus))

    def gradient(self, z: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.size)
        grad[self.rho] = z[self.x] - self.potential_minus
        grad[self.x] = z[self.rho] - self.spreads
        return grad

    def hessian(self, z: np.ndarray) -> np.ndarray:
        hess = np.zeros((self.size, self.size))
        index = np.arange(self.n)
        hess[index, self.n + index] = 1.0
        hess[self.n + index, index] = 1.0
        return hess

    # Complementarity products: μ+(u - x), μ-(x - l), ν+(cap - Hᵀx), ν-(cap + Hᵀx)

    def complementarity(self, z: np.ndarray) -> np.ndarray:
        x = z[self.x]
        flows = self.impacts.T @ x
        return np.concatenate([
            z[self.mu_upper] * (self.upper - x),
            z[self.mu_lower] * (x - self.lower),
            z[self.nu_upper] * (self.limits - flows),
            z[self.nu_lower] * (self.limits + flows),
        ])

    def complementarity_jacobian(self, z: np.ndarray) -> np.ndarray:
        n, n_line = self.n, self.n_line
        x = z[self.x]
        flows = self.impacts.T @ x
        jac = np.zeros((2 * n + 2 * n_line, self.size))
        index = np.arange(n)
        lines = np.arange(n_line)

        jac[index, self.mu_upper.start + index] = self.upper - x
        jac[index, self.n + index] = -z[self.mu_upper]

        jac[n + index, self.mu_lower.start + index] = x - self.lower
        jac[n + index, self.n + index] = z[self.mu_lower]

        jac[2 * n + lines, self.nu_upper.start + lines] = self.limits - flows
        jac[2 * n:2 * n + n_line, self.x] = -z[self.nu_upper][:, np.newaxis] * self.impacts.T

        jac[2 * n + n_line + lines, self.nu_lower.start + lines] = self.limits + flows
        jac[2 * n + n_line:, self.x] = z[self.nu_lower][:, np.newaxis] * self.impacts.T
        return jac

    def complementarity_hessian(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        n, n_line = self.n, self.n_line
        hess = np.zeros((self.size, self.size))
        index = np.arange(n)
        x_cols = self.n + index

        hess[x_cols, self.mu_upper.start + index] = -v[:n]
        hess[x_cols, self.mu_lower.start + index] = v[n:2 * n]
        hess[self.x, self.nu_upper] = -self.impacts * v[2 * n:2 * n + n_line]
        hess[self.x, self.nu_lower] = self.impacts * v[2 * n + n_line:]
        return hess + hess.T

    def stationarity(self, z: np.ndarray) -> np.ndarray:
        """
        ρ + tie - H(ν+ - ν-) - μ+ + μ- per offer.
        """
        line_duals = z[self.nu_upper] - z[self.nu_lower]
        return z[self.rho] + self.tie_offsets - self.impacts @ line_duals - z[self.mu_upper] + z[self.mu_lower]

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lower = np.concatenate([self.price_low, self.lower, np.zeros(2 * self.n + 2 * self.n_line)])
        upper = np.concatenate([self.price_high, self.upper, np.full(2 * self.n + 2 * self.n_line, np.inf)])
        return lower, upper

    def linear_constraint(self) -> Tuple[LinearConstraint, Bounds]:
        """
        Line flow limits, stationarity and fixed variables as linear constraints, with the remaining bounds.
        Variables with equal bounds become equality rows.
        """
        n, n_line = self.n, self.n_line
        rows, low, high = [], [], []

        flows = np.zeros((n_line, self.size))
        flows[:, self.x] = self.impacts.T
        rows.append(flows)
        low.append(-self.limits)
        high.append(self.limits)

        stationarity = np.zeros((n, self.size))
        index = np.arange(n)
        stationarity[index, index] = 1.0
        stationarity[:, self.nu_upper] = -self.impacts
        stationarity[:, self.nu_lower] = self.impacts
        stationarity[index, self.mu_upper.start + index] = -1.0
        stationarity[index, self.mu_lower.start + index] = 1.0
        rows.append(stationarity)
        low.append(-self.tie_offsets)
        high.append(-self.tie_offsets)

        lower, upper = self.bounds()
        fixed = np.flatnonzero(lower == upper)
        if fixed.size:
            pinned = np.zeros((fixed.size, self.size))
            pinned[np.arange(fixed.size), fixed] = 1.0
            rows.append(pinned)
            low.append(lower[fixed])
            high.append(upper[fixed])
            lower = lower.copy()
            upper = upper.copy()
            lower[fixed] = -np.inf
            upper[fixed] = np.inf

        return LinearConstraint(np.vstack(rows), np.concatenate(low), np.concatenate(high)), Bounds(lower, upper)

    def snap_prices(self, prices: np.ndarray) -> np.ndarray:
        prices = np.clip(prices, self.price_low, self.price_high)
        prices = np.where(np.abs(prices - self.price_low) <= SNAP_TOLERANCE, self.price_low, prices)
        return np.where(np.abs(prices - self.price_high) <= SNAP_TOLERANCE, self.price_high, prices)

    def profile(self, prices: np.ndarray) -> dict:
        """
        Bid profile offering every upper bound at the given prices.
        """
        return {
            key: BidDecision(player=key[0], path=key[1], ftr_type=ftr_type, price=float(price), quantity=float(upper))
            for key, ftr_type, price, upper in zip(self.keys, self.ftr_types, prices, self.upper)
        }

    def outcome(self, z: np.ndarray) -> ClearingOutcome:
        """
        Auction outcome read off a point of the program: bids at ρ, awards x and the multipliers as duals.
        """
        game = self.game
        offers = [
            Offer(
                player=key[0],
                path=key[1],
                ftr_type=ftr_type,
                price=float(price),
                quantity_max=float(upper),
                quantity_min=float(lower),
            )
            for key, ftr_type, price, upper, lower in zip(self.keys, self.ftr_types, z[self.rho], self.upper, self.lower)
        ]
        instance = build_instance(
            offers,
            game.path_impacts,
            self.limits,
            line_ids=game.line_ids,
            tie_break=game.options.tie_break,
            tolerance=game.options.lp_tolerance,
        )
        return assemble_outcome(
            instance,
            z[self.x].copy(),
            upper_line=z[self.nu_upper].copy(),
            lower_line=z[self.nu_lower].copy(),
            upper=z[self.mu_upper].copy(),
            lower=z[self.mu_lower].copy(),
        )

    def feasibility(self, z: np.ndarray) -> float:
        """
        Largest violation of the line limits, the award bounds and the multiplier signs.
        """
        x = z[self.x]
        flows = self.impacts.T @ x
        violations = np.concatenate([
            np.abs(flows) - self.limits,
            self.lower - x,
            x - self.upper,
            -z[2 * self.n:],
        ])
        return float(max(0.0, np.max(violations, initial=0.0)))


def reduce_bilevel(game: Game, types: Mapping[Key, str]) -> KktSystem:
    """
    Reduces the game with fixed FTR types to a single level program.
    (player, path) pairs whose type has no bid band are left out.

    :param game: The game.
    :param types: FTR type per (player, path).
    :raises InconsistentBoundsError: If a player's FTR bounds cross.
    """
    keys, ftr_types, spreads, lows, highs, uppers, lowers, plus, minus, rows = [], [], [], [], [], [], [], [], [], []
    for player in game.players:
        for terms in player.terms:
            ftr_type = types.get(terms.key)
            if ftr_type is None:
                continue
            if terms.ftr_min > terms.ftr_max:
                raise InconsistentBoundsError(
                    f"{terms.player} on {terms.path}: ftr_min {terms.ftr_min} exceeds ftr_max {terms.ftr_max}"
                )
            band = terms.band(ftr_type)
            if band is None:
                logger.debug(f"{terms.player} on {terms.path}: no {ftr_type} band, leaving it out.")
                continue
            potential = terms.fcp - abs(terms.rcp)
            row = np.asarray(game.path_impacts[terms.path], dtype=float)
            keys.append(terms.key)
            ftr_types.append(ftr_type)
            spreads.append(expected_spread(ftr_type, terms.zeta_f, terms.spread))
            lows.append(band[0])
            highs.append(band[1])
            uppers.append(terms.ftr_max)
            lowers.append(terms.request_range[0])
            plus.append(max(0.0, potential))
            minus.append(min(0.0, potential))
            rows.append(np.maximum(row, 0.0) if ftr_type == OPTION else row)

    n = len(keys)
    return KktSystem(
        game=game,
        keys=tuple(keys),
        ftr_types=tuple(ftr_types),
        spreads=np.array(spreads, dtype=float),
        price_low=np.array(lows, dtype=float),
        price_high=np.array(highs, dtype=float),
        upper=np.array(uppers, dtype=float),
        lower=np.array(lowers, dtype=float),
        potential_plus=np.array(plus, dtype=float),
        potential_minus=np.array(minus, dtype=float),
        impacts=np.vstack(rows) if rows else np.zeros((0, len(game.limits))),
        limits=np.asarray(game.limits, dtype=float),
        tie_offsets=game.options.tie_break * (n - np.arange(n)),
    )


def _relaxation_schedule(options: elements.SolverOptions) -> List[float]:
    taus = []
    tau = options.tau_start
    while tau > options.tau_end * (1 + 1e-9):
        taus.append(tau)
        tau *= options.tau_factor
    taus.append(options.tau_end)
    return taus


def _starting_point(
        system: KktSystem, options: elements.SolverOptions, warm_start: Optional[Mapping[Key, BidDecision]]
) -> np.ndarray:
    z = np.zeros(system.size)
    width = system.price_high - system.price_low
    prices = (system.price_low + system.price_high) / 2
    if warm_start:
        for index, (key, ftr_type) in enumerate(zip(system.keys, system.ftr_types)):
            decision = warm_start.get(key)
            if decision is not None and decision.ftr_type == ftr_type:
                prices[index] = decision.price
    z[system.rho] = np.clip(prices, system.price_low + 0.01 * width, system.price_high - 0.01 * width)

    awards = system.game.clear(system.profile(system.snap_prices(z[system.rho]))).awards
    span = system.upper - system.lower
    z[system.x] = np.clip(awards, system.lower + 0.01 * span, system.upper - 0.01 * span)

    rng = np.random.default_rng(options.seed)
    count = 2 * system.n + 2 * system.n_line
    z[2 * system.n:] = MULTIPLIER_START * (1.0 + 0.1 * rng.random(count))
    return z


def solve_kkt(
        system: KktSystem,
        options: Optional[elements.SolverOptions] = None,
        warm_start: Optional[Mapping[Key, BidDecision]] = None,
) -> EquilibriumSolution:
    """
    Solves the single level program with a relaxation schedule on the complementarity products.

    The returned solution is the point the last stage reached: bids at ρ, awards x and the
    multipliers as the auction duals. Bids and awards are only projected onto their bounds;
    nothing is cleared again. The residuals are those of
    that point: stationarity, complementarity, primal feasibility and band. A warm start only seeds
    the starting point; compare the result with it through the report's joint agreement.

    :raises InfeasibleError: If the award lower bounds can't fit within the line limits.
    :raises NonconvergenceError: If the returned point misses the residual tolerance. (carries the solution)
    """
    options = options or system.game.options
    game = system.game
    if not system.n:
        return game.solution({}, JOINT)
    try:
        game.clear(system.profile(system.price_low))
    except InfeasibleInstanceError as e:
        raise InfeasibleError(f"Joint program has no feasible point: {e}")

    linear, bounds = system.linear_constraint()
    z = _starting_point(system, options, warm_start)
    relaxed = float("nan")
    for tau in _relaxation_schedule(options):
        complementarity = NonlinearConstraint(
            system.complementarity,
            -np.inf,
            tau,
            jac=system.complementarity_jacobian,
            hess=system.complementarity_hessian,
        )
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                result = minimize(
                    system.objective,
                    z,
                    method="trust-constr",
                    jac=system.gradient,
                    hess=system.hessian,
                    constraints=[linear, complementarity],
                    bounds=bounds,
                    options={"maxiter": options.kkt_max_iter, "verbose": 0},
                )
        except (ValueError, np.linalg.LinAlgError) as e:
            logger.warning(f"Relaxation stage τ={tau:.1e} failed: {e}")
            break
        for warning in caught:
            logger.debug(f"trust-constr: {warning.message}")
        z = result.x
        relaxed = float(np.max(system.complementarity(z), initial=0.0))
        logger.debug(
            f"τ={tau:.1e}: status {result.status}, objective {-result.fun:.6f}, "
            f"violation {result.constr_violation:.2e}, complementarity {relaxed:.2e}"
        )

    feasibility = system.feasibility(z)
    point = z.copy()
    point[system.rho] = np.clip(z[system.rho], system.price_low, system.price_high)
    point[system.x] = np.clip(z[system.x], system.lower, system.upper)
    point[2 * system.n:] = np.maximum(z[2 * system.n:], 0.0)

    profile = system.profile(point[system.rho])
    solution = game.solution(profile, JOINT, outcome=system.outcome(point))
    solution.residuals["feasibility"] = feasibility
    solution.residuals["relaxed_complementarity"] = relaxed

    worst = max(solution.residuals[name] for name in ("stationarity", "complementarity", "band", "feasibility"))
    if worst > options.kkt_tolerance:
        raise NonconvergenceError(
            f"Joint solution residual {worst:.3g} exceeds tolerance {options.kkt_tolerance:.3g}", solution=solution
        )
    logger.info(f"Joint solution objective {solution.objective:.4f} (residual {worst:.2e})")
    return solution
