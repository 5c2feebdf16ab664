"""
The FTR auction game: players' bid spaces, best responses against the cleared auction,
best response iteration and the ε-Nash check.
"""
import contextlib
import itertools
import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import attr
import numpy as np

from ftrbid import elements
from ftrbid.clearing import ClearingOutcome, Offer, build_instance, clear_market
from ftrbid.contribution import (
    FTR_TYPES,
    OBLIGATION,
    OPTION,
    BidDecision,
    ContributionMetrics,
    expected_spread,
    risk_adjusted_profit,
    signed_ftrs,
)
from ftrbid.exceptions import InfeasibleInstanceError
from ftrbid.risk import RiskMetrics, bid_caps
from ftrbid.utils.multi_proc import TPool

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ROUNDS = "max_rounds"
JOINT = "joint"

# Awards at or below this are treated as no award.
AWARD_TOLERANCE = 1e-9

# Clearing outcomes kept per game.
CACHE_SIZE = 200_000

# Upper limit on the bid combinations tried per player when searching joint deviations.
JOINT_DEVIATIONS = 4096

Key = Tuple[str, str]
Profile = Dict[Key, BidDecision]


@attr.s(frozen=True, auto_attribs=True)
class PathTerms:
    """
    Everything a player needs to price bids on one path.

    :var player: Player name.
    :var path: Path name.
    :var share: Estimated share (MW).
    :var fcp: Forward contribution potential (MW).
    :var rcp: Reverse contribution potential (MW).
    :var ftr_min: Lower FTR bound (MW).
    :var ftr_max: Upper FTR bound (MW).
    :var zeta_f: Forward chance coefficient.
    :var zeta_r: Reverse chance coefficient.
    :var spread: Estimated price spread (currency/MWh).
    :var price_floor: Reserve price of obligation bids (currency/MWh).
    """
    player: str
    path: str
    share: float
    fcp: float
    rcp: float
    ftr_min: float
    ftr_max: float
    zeta_f: float
    zeta_r: float
    spread: float
    price_floor: float = 0.0

    @classmethod
    def from_metrics(
            cls, contribution: ContributionMetrics, risk: RiskMetrics, price_floor: float = 0.0
    ) -> "PathTerms":
        return cls(
            player=contribution.player,
            path=contribution.path,
            share=contribution.share,
            fcp=contribution.fcp,
            rcp=contribution.rcp,
            ftr_min=contribution.ftr_min,
            ftr_max=contribution.ftr_max,
            zeta_f=risk.zeta_f,
            zeta_r=risk.zeta_r,
            spread=risk.spread,
            price_floor=price_floor,
        )

    @property
    def key(self) -> Key:
        return self.player, self.path

    @property
    def obligation_allowed(self) -> bool:
        return self.zeta_f > self.zeta_r

    def band(self, ftr_type: str) -> Optional[Tuple[float, float]]:
        """
        Bid price band of an FTR type, or None if the type can't be bid.
        """
        if self.ftr_max <= 0:
            return None
        obligation_cap, option_cap = bid_caps(self.zeta_f, self.spread)
        if ftr_type == OBLIGATION:
            if not self.obligation_allowed:
                return None
            low, high = self.price_floor, obligation_cap
        elif ftr_type == OPTION:
            low, high = max(obligation_cap, self.price_floor), option_cap
        else:
            raise ValueError(f"Invalid FTR type: {ftr_type}")
        if low > high:
            return None
        return low, high

    def available_types(self, allowed: Iterable[str] = FTR_TYPES) -> Tuple[str, ...]:
        allowed = set(allowed)
        return tuple(ftr_type for ftr_type in FTR_TYPES if ftr_type in allowed and self.band(ftr_type))

    @property
    def request_range(self) -> Tuple[float, float]:
        """Quantities a bid may request: from max(0, ftr_min), which is also the smallest award, to ftr_max."""
        return max(0.0, self.ftr_min), self.ftr_max

    def quantity_min(self, quantity: float) -> float:
        """Smallest award the auction must grant a request of `quantity` MW."""
        return min(self.request_range[0], max(quantity, 0.0))

    def profit(self, ftr_type: str, price: float, award: float) -> float:
        """
        Profit of an awarded bid. Nothing awarded settles nothing, whatever the potentials.
        """
        if award <= AWARD_TOLERANCE:
            return 0.0
        if ftr_type == OBLIGATION and not self.obligation_allowed:
            return 0.0
        spread = expected_spread(ftr_type, self.zeta_f, self.spread)
        return risk_adjusted_profit(award, self.fcp, self.rcp, spread, price)


@attr.s(frozen=True, auto_attribs=True)
class PlayerProblem:
    """
    A player's upper level problem: one set of terms per path.
    """
    name: str
    terms: Tuple[PathTerms, ...]

    def terms_for(self, path: str) -> PathTerms:
        for terms in self.terms:
            if terms.path == path:
                return terms
        raise KeyError(f"Player {self.name} has no terms for path {path}")


@attr.s(frozen=True, auto_attribs=True)
class PlayerResult:
    """
    Outcome of one player's bid on one path.

    :var decision: Bid with its award.
    :var profit: Realized profit (currency/h).
    :var ftr_positive: Positive FTR quantity (MW).
    :var ftr_negative: Negative FTR quantity (MW).
    """
    decision: BidDecision
    profit: float
    ftr_positive: float
    ftr_negative: float


@attr.s(frozen=True, auto_attribs=True)
class NashReport:
    """
    Result of the unilateral deviation search.

    :var max_improvement: Largest profit improvement found.
    :var improvements: Largest improvement per player.
    :var player: Player with the largest improvement. (None if nobody improves)
    :var deviation: Bids achieving it, one per changed path. (empty if nobody improves)
    :var grid_resolution: Points per dimension searched.
    :var tolerance: Accepted improvement.
    :var evaluated: Number of deviations evaluated.
    :var joint_evaluated: How many of them changed more than one path.
    :var certified: Whether no deviation improves by more than the tolerance.
    """
    max_improvement: float
    improvements: Dict[str, float]
    player: Optional[str]
    deviation: Tuple[BidDecision, ...]
    grid_resolution: int
    tolerance: float
    evaluated: int
    joint_evaluated: int
    certified: bool


@attr.s(frozen=True, auto_attribs=True, eq=False)
class EquilibriumSolution:
    """
    Bid profile with its cleared auction.

    :var results: Per (player, path) outcome, in player then path order.
    :var player_profits: Total profit per player.
    :var objective: Sum of all players' profits.
    :var status: "converged", "max_rounds" or "joint".
    :var rounds: Best response rounds that changed the profile.
    :var residuals: Stationarity, complementarity and band residuals.
    :var outcome: Cleared auction.
    :var nash: Deviation search report, once verified.
    """
    results: Tuple[PlayerResult, ...]
    player_profits: Dict[str, float]
    objective: float
    status: str
    rounds: int
    residuals: Dict[str, float]
    outcome: ClearingOutcome = attr.ib(repr=False)
    nash: Optional[NashReport] = None

    @property
    def converged(self) -> bool:
        return self.status != MAX_ROUNDS

    @property
    def decisions(self) -> Tuple[BidDecision, ...]:
        return tuple(result.decision for result in self.results)

    def profile(self) -> Profile:
        """Bids without their awards."""
        return {result.decision.key: attr.evolve(result.decision, award=None) for result in self.results}

    def result(self, player: str, path: str) -> Optional[PlayerResult]:
        for result in self.results:
            if result.decision.key == (player, path):
                return result
        return None


@attr.s(auto_attribs=True, eq=False)
class Game:
    """
    The auction game: players, the paths' impact rows and line limits.

    :var players: Player problems, in tie-break order.
    :var path_impacts: Impact row per path name.
    :var limits: Capacity per line.
    :var line_ids: Line ids of the impact columns.
    :var options: Solver options.
    """
    players: Tuple[PlayerProblem, ...]
    path_impacts: Dict[str, np.ndarray]
    limits: np.ndarray
    line_ids: Tuple[int, ...] = ()
    options: elements.SolverOptions = attr.ib(factory=elements.SolverOptions)
    _cache: dict = attr.ib(factory=dict, init=False, repr=False)

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)

    def player(self, name: str) -> PlayerProblem:
        for player in self.players:
            if player.name == name:
                return player
        raise KeyError(f"Unknown player {name}")

    def terms(self, key: Key) -> PathTerms:
        player, path = key
        return self.player(player).terms_for(path)

    def offers(self, profile: Mapping[Key, BidDecision]) -> List[Offer]:
        offers = []
        for player in self.players:
            for terms in player.terms:
                decision = profile.get(terms.key)
                if decision is None:
                    continue
                offers.append(Offer(
                    player=player.name,
                    path=terms.path,
                    ftr_type=decision.ftr_type,
                    price=decision.price,
                    quantity_max=decision.quantity,
                    quantity_min=terms.quantity_min(decision.quantity),
                ))
        return offers

    def clear(self, profile: Mapping[Key, BidDecision]) -> ClearingOutcome:
        """
        Clears the auction for a bid profile. Outcomes are cached per profile.

        :raises InfeasibleInstanceError: If the players' award minimums can't all be granted.
        """
        offers = self.offers(profile)
        key = tuple((o.player, o.path, o.ftr_type, o.price, o.quantity_max, o.quantity_min) for o in offers)
        outcome = self._cache.get(key)
        if outcome is None:
            if len(self._cache) >= CACHE_SIZE:
                self._cache.clear()
            instance = build_instance(
                offers,
                self.path_impacts,
                self.limits,
                line_ids=self.line_ids,
                tie_break=self.options.tie_break,
                tolerance=self.options.lp_tolerance,
            )
            try:
                outcome = clear_market(instance)
            except InfeasibleInstanceError as e:
                # Cached as its message.
                outcome = str(e)
            self._cache[key] = outcome
        if isinstance(outcome, str):
            raise InfeasibleInstanceError(outcome)
        return outcome

    def admissible(self, profile: Mapping[Key, BidDecision]) -> bool:
        """Whether the auction can grant every bid's award minimum at once."""
        try:
            self.clear(profile)
        except InfeasibleInstanceError:
            return False
        return True

    def payoffs(self, profile: Mapping[Key, BidDecision]) -> Dict[str, float]:
        outcome = self.clear(profile)
        payoffs = {player.name: 0.0 for player in self.players}
        for offer, award in zip(outcome.instance.offers, outcome.awards):
            terms = self.terms((offer.player, offer.path))
            payoffs[offer.player] += terms.profit(offer.ftr_type, offer.price, award)
        return payoffs

    def payoff(self, player: str, profile: Mapping[Key, BidDecision]) -> float:
        return self.payoffs(profile)[player]

    def try_payoff(self, player: str, profile: Mapping[Key, BidDecision]) -> Optional[float]:
        """Payoff of a player, or None when the profile isn't admissible."""
        try:
            return self.payoff(player, profile)
        except InfeasibleInstanceError:
            return None

    def joint_objective(self, profile: Mapping[Key, BidDecision]) -> float:
        return float(sum(self.payoffs(profile).values()))

    def candidates(
            self, terms: PathTerms, allowed: Iterable[str] = FTR_TYPES, grid_resolution: Optional[int] = None
    ) -> List[BidDecision]:
        """
        Bid grid of a player on one path: every available type, prices spread over the band
        and quantities spread over the request range.
        """
        resolution = grid_resolution or self.options.grid_resolution
        low_q, high_q = terms.request_range
        quantities = _grid(low_q, high_q, resolution)
        candidates = []
        for ftr_type in terms.available_types(allowed):
            low, high = terms.band(ftr_type)
            for price in _grid(low, high, resolution):
                for quantity in quantities:
                    candidates.append(BidDecision(
                        player=terms.player, path=terms.path, ftr_type=ftr_type, price=price, quantity=quantity
                    ))
        return candidates

    def initial_profile(
            self, allowed: Iterable[str] = FTR_TYPES, types: Optional[Mapping[Key, str]] = None
    ) -> Profile:
        """
        Starting profile: bids at band midpoints and quantities at the share clipped to the request range.
        Obligations are preferred over options unless `types` says otherwise.
        """
        allowed = tuple(allowed)
        profile = {}
        for player in self.players:
            for terms in player.terms:
                available = terms.available_types(allowed)
                if not available:
                    continue
                ftr_type = available[0]
                if types and types.get(terms.key) in available:
                    ftr_type = types[terms.key]
                low, high = terms.band(ftr_type)
                low_q, high_q = terms.request_range
                profile[terms.key] = BidDecision(
                    player=terms.player,
                    path=terms.path,
                    ftr_type=ftr_type,
                    price=(low + high) / 2,
                    quantity=float(np.clip(terms.share, low_q, high_q)),
                )
        return profile

    def band_residual(self, profile: Mapping[Key, BidDecision]) -> float:
        """
        Largest distance of a bid price outside its band.
        """
        residual = 0.0
        for key, decision in profile.items():
            band = self.terms(key).band(decision.ftr_type)
            if band is None:
                residual = max(residual, abs(decision.price))
                continue
            low, high = band
            residual = max(residual, low - decision.price, decision.price - high)
        return float(residual)

    def solution(
            self,
            profile: Mapping[Key, BidDecision],
            status: str,
            rounds: int = 0,
            outcome: Optional[ClearingOutcome] = None,
    ) -> EquilibriumSolution:
        """
        Clears a profile and collects its per player results.

        :param outcome: Auction outcome to settle the profile with instead of clearing it.
            (offers in profile order)
        """
        if outcome is None:
            outcome = self.clear(profile)
        results = []
        player_profits = {player.name: 0.0 for player in self.players}
        for offer, award in zip(outcome.instance.offers, outcome.awards):
            terms = self.terms((offer.player, offer.path))
            decision = attr.evolve(profile[terms.key], award=float(award))
            profit = terms.profit(offer.ftr_type, offer.price, award)
            positive, negative = signed_ftrs(float(award), terms.fcp, terms.rcp)
            results.append(PlayerResult(decision=decision, profit=profit, ftr_positive=positive, ftr_negative=negative))
            player_profits[offer.player] += profit
        return EquilibriumSolution(
            results=tuple(results),
            player_profits=player_profits,
            objective=float(sum(player_profits.values())),
            status=status,
            rounds=rounds,
            residuals={
                "stationarity": outcome.stationarity_residual,
                "complementarity": outcome.complementarity_residual,
                "band": self.band_residual(profile),
            },
            outcome=outcome,
        )


def _grid(low: float, high: float, resolution: int) -> List[float]:
    if high - low <= 1e-12 or resolution <= 1:
        return [float(low)]
    return [float(value) for value in np.linspace(low, high, resolution)]


def build_game(
        contributions: Mapping[Key, ContributionMetrics],
        risks: Mapping[str, RiskMetrics],
        players: Sequence[elements.Player],
        path_impacts: Mapping[str, np.ndarray],
        limits: np.ndarray,
        *,
        line_ids: Sequence[int] = (),
        options: Optional[elements.SolverOptions] = None,
) -> Game:
    """
    Builds the game from the risk and contribution metrics.
    """
    options = options or elements.SolverOptions()
    problems = []
    for player in players:
        terms = tuple(
            PathTerms.from_metrics(contributions[(player.name, path)], risk, options.price_floor)
            for path, risk in risks.items()
        )
        problems.append(PlayerProblem(name=player.name, terms=terms))
    return Game(
        players=tuple(problems),
        path_impacts=dict(path_impacts),
        limits=np.asarray(limits, dtype=float),
        line_ids=tuple(line_ids),
        options=options,
    )




def best_response(
        game: Game,
        player: str,
        profile: Mapping[Key, BidDecision],
        allowed: Iterable[str] = FTR_TYPES,
        *,
        grid_resolution: Optional[int] = None,
) -> Tuple[Profile, float]:
    """
    Coordinate ascent over a player's paths with the other players' bids fixed.

    Each sweep visits the player's paths in turn and moves that path's bid to its best grid
    candidate against the cleared auction while the player's other bids stay put. The result is
    a coordinate-wise optimum, so a change paying off only when several paths move together can
    be missed; :func:`verify_nash` searches those. A path's bid only changes when the best
    candidate beats the current profit by more than the Nash tolerance. Candidates whose award
    minimums can't be granted are skipped.

    :return: The player's new bids and the profit gained.
        (gained from 0 when the starting profile isn't admissible)
    """
    allowed = tuple(allowed)
    tolerance = game.options.nash_tolerance
    profile = dict(profile)
    start = game.try_payoff(player, profile)
    current = -np.inf if start is None else start

    for _ in range(game.options.max_sweeps):
        switched = False
        for terms in game.player(player).terms:
            best_value, best = current, None
            for candidate in game.candidates(terms, allowed, grid_resolution):
                if candidate == profile.get(terms.key):
                    continue
                trial = dict(profile)
                trial[terms.key] = candidate
                value = game.try_payoff(player, trial)
                if value is not None and value > best_value:
                    best_value, best = value, candidate
            if best is not None and best_value > current + tolerance:
                logger.debug(
                    f"{player} on {terms.path}: {best.ftr_type} at {best.price:.4f} for {best.quantity:.4f} MW "
                    f"({current:.4f} -> {best_value:.4f})"
                )
                profile[terms.key] = best
                current = best_value
                switched = True
        if not switched:
            break

    decisions = {key: decision for key, decision in profile.items() if key[0] == player}
    if not np.isfinite(current):
        return decisions, 0.0
    return decisions, current - (0.0 if start is None else start)


def _respond(args) -> Tuple[Profile, float]:
    game, player, profile, allowed = args
    return best_response(game, player, profile, allowed)


def _joint_width(n_paths: int) -> int:
    """
    Single path deviations kept per path so that the joint combinations stay within JOINT_DEVIATIONS.
    """
    width = 0
    while (width + 2) ** n_paths <= JOINT_DEVIATIONS:
        width += 1
    return width


def _deviations(args) -> Tuple[str, float, Tuple[BidDecision, ...], int, int]:
    """
    Largest unilateral improvement of one player.

    Single path deviations cover every grid bid of every allowed type plus withdrawing the bid.
    Joint deviations change two or more paths at once, combining each path's current bid with
    its best single path deviations.
    """
    game, player, profile, allowed, grid_resolution = args
    base = game.payoff(player, profile)
    best_gain, best = 0.0, ()
    evaluated = joint_evaluated = 0

    ranked = {}
    for terms in game.player(player).terms:
        current = profile.get(terms.key)
        candidates = game.candidates(terms, allowed, grid_resolution)
        if current is not None and current.quantity > 0:
            candidates.append(attr.evolve(current, quantity=0.0, award=None))
        scored = []
        for candidate in candidates:
            trial = dict(profile)
            trial[terms.key] = candidate
            value = game.try_payoff(player, trial)
            evaluated += 1
            if value is None:
                continue
            gain = value - base
            scored.append((gain, candidate))
            if gain > best_gain:
                best_gain, best = gain, (candidate,)
        # Stable, so equal gains keep grid order.
        scored.sort(key=lambda entry: entry[0], reverse=True)
        if scored:
            ranked[terms.key] = (current, [candidate for _, candidate in scored])

    if len(ranked) > 1:
        keys = list(ranked)
        width = _joint_width(len(keys))
        choices = [[ranked[key][0]] + ranked[key][1][:width] for key in keys]
        for combination in itertools.product(*choices):
            changed = tuple(bid for key, bid in zip(keys, combination) if bid != ranked[key][0])
            if len(changed) < 2:
                continue
            trial = dict(profile)
            for key, bid in zip(keys, combination):
                if bid is None:
                    trial.pop(key, None)
                else:
                    trial[key] = bid
            value = game.try_payoff(player, trial)
            evaluated += 1
            joint_evaluated += 1
            if value is not None and value - base > best_gain:
                best_gain, best = value - base, changed

    return player, best_gain, best, evaluated, joint_evaluated


@contextlib.contextmanager
def _mapper(processes: int):
    """
    Yields a map function, backed by a worker pool when more than one process is requested.
    """
    if processes > 1:
        with TPool(processes=processes) as pool:
            yield pool.map
    else:
        yield lambda func, iterable: list(map(func, iterable))


def verify_nash(
        game: Game,
        profile: Mapping[Key, BidDecision],
        allowed: Iterable[str] = FTR_TYPES,
        *,
        grid_resolution: Optional[int] = None,
        tolerance: Optional[float] = None,
) -> NashReport:
    """
    Searches every player's unilateral deviations and reports the largest profit improvement.
    The profile is certified ε-Nash when no deviation improves by more than the tolerance.

    Deviations move a path's bid anywhere on the deviation grid, switch its FTR type, withdraw it,
    or change several paths at once. The deviation grid defaults to 2 * grid_resolution - 1 points
    per dimension: the best response grid plus the midpoints between its points.

    :raises InfeasibleInstanceError: If the profile's own award minimums can't be granted.
    """
    allowed = tuple(allowed)
    resolution = grid_resolution or max(1, 2 * game.options.grid_resolution - 1)
    tolerance = game.options.nash_tolerance if tolerance is None else tolerance
    profile = dict(profile)
    game.clear(profile)

    tasks = [(game, player.name, profile, allowed, resolution) for player in game.players]
    with _mapper(game.options.processes) as map_:
        found = map_(_deviations, tasks)

    improvements = {player: gain for player, gain, *_ in found}
    best_player, best_gain, best_deviation = None, 0.0, ()
    for player, gain, deviation, *_ in found:
        if gain > best_gain:
            best_player, best_gain, best_deviation = player, gain, deviation

    report = NashReport(
        max_improvement=float(best_gain),
        improvements=improvements,
        player=best_player,
        deviation=tuple(best_deviation),
        grid_resolution=resolution,
        tolerance=tolerance,
        evaluated=sum(entry[3] for entry in found),
        joint_evaluated=sum(entry[4] for entry in found),
        certified=bool(best_gain <= tolerance),
    )
    if report.certified:
        logger.info(f"Profile is ε-Nash: largest improvement {best_gain:.6g} over {report.evaluated} deviations.")
    else:
        logger.info(f"Profile is not ε-Nash: {best_player} improves by {best_gain:.6g}.")
    return report


def iterate_sequential(
        game: Game,
        initial: Mapping[Key, BidDecision],
        allowed: Iterable[str] = FTR_TYPES,
        *,
        max_rounds: Optional[int] = None,
        update: Optional[str] = None,
) -> EquilibriumSolution:
    """
    Repeats best responses until a round changes no bid.

    Sequential updates commit each player's response immediately. Simultaneous updates
    respond to the round's starting profile and commit at the end of the round, and may
    land on a profile whose award minimums can't be granted together; such rounds are
    never returned. When the round limit is hit, the round-end profile with the largest
    joint objective is returned.

    :raises InfeasibleInstanceError: If the award minimums of the starting profile can't be granted.
    """
    allowed = tuple(allowed)
    max_rounds = max_rounds or game.options.max_rounds
    update = update or game.options.update
    profile = dict(initial)
    try:
        game.clear(profile)
    except InfeasibleInstanceError as e:
        raise InfeasibleInstanceError(f"Starting profile can't be cleared with its award minimums: {e}")

    history = [(game.joint_objective(profile), 0, dict(profile))]
    status = MAX_ROUNDS
    changed_rounds = 0

    with _mapper(game.options.processes if update == "simultaneous" else 1) as map_:
        for round_ in range(1, max_rounds + 1):
            before = dict(profile)
            if update == "simultaneous":
                tasks = [(game, player.name, before, allowed) for player in game.players]
                for decisions, _ in map_(_respond, tasks):
                    profile.update(decisions)
            else:
                for player in game.players:
                    decisions, _ = best_response(game, player.name, profile, allowed)
                    profile.update(decisions)

            admissible = game.admissible(profile)
            if profile == before:
                if admissible:
                    status = CONVERGED
                break
            changed_rounds = round_
            if not admissible:
                logger.debug(f"Round {round_}: award minimums can't be granted together.")
                continue
            objective = game.joint_objective(profile)
            history.append((objective, -round_, dict(profile)))
            logger.debug(f"Round {round_}: joint objective {objective:.4f}")

    if status == MAX_ROUNDS:
        # The starting profile only stands in when no round ended admissible.
        rounds = history[1:] or history
        objective, round_, profile = max(rounds, key=lambda entry: entry[:2])
        logger.warning(
            f"Best responses didn't settle within {max_rounds} rounds. "
            f"Using round {-round_} with joint objective {objective:.4f}"
        )
    else:
        logger.info(f"Best responses settled after {changed_rounds} rounds.")
    return game.solution(profile, status, rounds=changed_rounds)
