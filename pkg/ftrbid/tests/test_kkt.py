"""
Tests the single level reduction and the relaxed complementarity solve.
"""
import attr
import numpy as np
import pytest

from ftrbid import elements
from ftrbid.contribution import OBLIGATION, OPTION, BidDecision
from ftrbid.equilibrium import JOINT, Game, PathTerms, PlayerProblem
from ftrbid.exceptions import InconsistentBoundsError, InfeasibleError, NonconvergenceError
from ftrbid.kkt import _relaxation_schedule, reduce_bilevel, solve_kkt

TYPES = {("P1", "A"): OBLIGATION, ("P2", "A"): OBLIGATION}


@pytest.fixture
def single_player():
    """One player with ample capacity: the best bid is the band floor for the whole upper bound."""
    terms = PathTerms(
        player="P1", path="A", share=5.0, fcp=1.0, rcp=0.0, ftr_min=5.0, ftr_max=6.0,
        zeta_f=0.8, zeta_r=0.2, spread=10.0,
    )
    return Game(
        players=(PlayerProblem(name="P1", terms=(terms,)),),
        path_impacts={"A": np.array([1.0])},
        limits=np.array([100.0]),
        line_ids=(1,),
        options=elements.SolverOptions(tau_start=1e-2, tau_end=1e-6, kkt_tolerance=1e-4),
    )


def _finite_difference(func, z, step=1e-6):
    columns = []
    for i in range(z.size):
        dz = np.zeros(z.size)
        dz[i] = step
        columns.append((np.asarray(func(z + dz)) - np.asarray(func(z - dz))) / (2 * step))
    return np.array(columns).T


def test_reduce(make_game):
    game = make_game(zeta_f=0.8, spread=10.0, fcp=1.0)
    system = reduce_bilevel(game, TYPES)
    assert system.n == 2
    assert system.n_line == 1
    assert system.size == 10
    assert system.keys == (("P1", "A"), ("P2", "A"))
    assert system.spreads == pytest.approx([6.0, 6.0])
    assert system.price_low == pytest.approx([0.0, 0.0])
    assert system.price_high == pytest.approx([6.0, 6.0])
    assert system.upper == pytest.approx([6.0, 6.0])
    assert system.lower == pytest.approx([5.0, 5.0])
    assert system.potential_plus == pytest.approx([1.0, 1.0])
    assert system.potential_minus == pytest.approx([0.0, 0.0])
    assert system.tie_offsets == pytest.approx([2e-6, 1e-6])

    lower, upper = system.bounds()
    assert lower.shape == upper.shape == (10,)
    assert upper[system.x] == pytest.approx([6.0, 6.0])
    assert lower[system.x] == pytest.approx([5.0, 5.0])
    assert np.isinf(upper[system.mu_upper]).all()


def test_reduce_options_row(make_game):
    game = make_game()
    game.path_impacts["A"] = np.array([-1.0])
    system = reduce_bilevel(game, {("P1", "A"): OPTION})
    assert system.n == 1
    # Counterflow doesn't count for options.
    assert system.impacts.tolist() == [[0.0]]


def test_reduce_skips(make_game):
    # Reversal more likely: no obligation band.
    game = make_game(zeta_f=0.4)
    system = reduce_bilevel(game, TYPES)
    assert system.n == 0
    assert system.size == 2

    solution = solve_kkt(system)
    assert solution.status == JOINT
    assert solution.results == ()
    assert solution.objective == 0.0

    assert reduce_bilevel(make_game(), {("P2", "A"): OBLIGATION}).keys == (("P2", "A"),)


def test_reduce_inconsistent(single_player):
    terms = single_player.players[0].terms[0]
    game = Game(
        players=(PlayerProblem(name="P1", terms=(attr.evolve(terms, ftr_min=7.0),)),),
        path_impacts=single_player.path_impacts,
        limits=single_player.limits,
    )
    with pytest.raises(InconsistentBoundsError):
        reduce_bilevel(game, {("P1", "A"): OBLIGATION})


def test_derivatives(make_game):
    game = make_game(zeta_f=0.8, spread=10.0, fcp=1.0, rcp=-2.0)
    system = reduce_bilevel(game, TYPES)
    rng = np.random.default_rng(3)
    z = rng.random(system.size) * 3

    assert system.gradient(z) == pytest.approx(_finite_difference(system.objective, z), abs=1e-5)
    assert system.hessian(z) == pytest.approx(_finite_difference(system.gradient, z), abs=1e-5)
    assert system.complementarity_jacobian(z) == pytest.approx(
        _finite_difference(system.complementarity, z), abs=1e-5
    )

    v = rng.random(2 * system.n + 2 * system.n_line)
    expected = _finite_difference(lambda point: v @ system.complementarity_jacobian(point), z)
    assert system.complementarity_hessian(z, v) == pytest.approx(expected, abs=1e-5)


def test_stationarity_at_clearing(make_game):
    """Cleared duals satisfy the embedded stationarity rows."""
    game = make_game(zeta_f=0.8, spread=10.0, ftr_min=0.0)
    system = reduce_bilevel(game, TYPES)
    profile = system.profile(np.array([3.0, 4.0]))
    outcome = game.clear(profile)

    z = np.zeros(system.size)
    z[system.rho] = [3.0, 4.0]
    z[system.x] = outcome.awards
    z[system.mu_upper] = outcome.upper_duals
    z[system.mu_lower] = outcome.lower_duals
    z[system.nu_upper] = outcome.upper_line_duals
    z[system.nu_lower] = outcome.lower_line_duals
    assert system.stationarity(z) == pytest.approx([0.0, 0.0], abs=1e-6)
    assert system.complementarity(z) == pytest.approx(np.zeros(6), abs=1e-6)


def test_linear_constraint(make_game):
    # Option band collapses to the cap, pinning both prices. The 5 MW requests pin the awards.
    system = reduce_bilevel(make_game(), {("P1", "A"): OPTION, ("P2", "A"): OPTION})
    assert system.price_low == pytest.approx(system.price_high)
    linear, bounds = system.linear_constraint()
    assert linear.A.shape == (1 + 2 + 4, system.size)
    assert np.isinf(bounds.lb[system.rho]).all()
    assert np.isinf(bounds.lb[system.x]).all()
    assert linear.lb[-4:] == pytest.approx([4.0, 4.0, 5.0, 5.0])


def test_snap_prices(make_game):
    system = reduce_bilevel(make_game(), TYPES)
    snapped = system.snap_prices(np.array([-1.0, 4.0 - 1e-8]))
    assert snapped.tolist() == [0.0, 4.0]
    assert system.snap_prices(np.array([2.5, 1e-7])).tolist() == [2.5, 0.0]


def test_relaxation_schedule():
    options = elements.SolverOptions(tau_start=0.1, tau_end=1e-3, tau_factor=0.1)
    assert _relaxation_schedule(options) == pytest.approx([0.1, 0.01, 0.001])
    assert len(_relaxation_schedule(elements.SolverOptions())) == 8
    assert _relaxation_schedule(elements.SolverOptions(tau_start=1e-9)) == [1e-8]


def test_solve(single_player):
    system = reduce_bilevel(single_player, {("P1", "A"): OBLIGATION})
    solution = solve_kkt(system)
    assert solution.status == JOINT
    decision = solution.result("P1", "A").decision
    assert decision.quantity == 6.0
    assert decision.award == pytest.approx(6.0, abs=1e-3)
    assert decision.price == pytest.approx(0.0, abs=1e-2)
    # FTR+ = 5 earns 6, all 6 MW pay the price.
    assert solution.objective == pytest.approx(30.0, abs=0.1)
    assert "relaxed_complementarity" in solution.residuals
    assert solution.residuals["feasibility"] <= 1e-4


def test_solve_warm_start(single_player):
    system = reduce_bilevel(single_player, {("P1", "A"): OBLIGATION})
    warm_start = {("P1", "A"): BidDecision(player="P1", path="A", ftr_type=OBLIGATION, price=5.0, quantity=6.0)}
    solution = solve_kkt(system, warm_start=warm_start)
    # The warm start only seeds the search, the reported bid is where it ended.
    assert solution.status == JOINT
    decision = solution.result("P1", "A").decision
    assert decision.price == pytest.approx(0.0, abs=1e-2)
    assert 5.0 <= decision.award <= 6.0
    assert solution.objective == pytest.approx(30.0, abs=0.1)
    assert solution.residuals["band"] == 0.0
    # Duals come from the program's multipliers: μ+ = ρ + tie-break.
    assert solution.outcome.upper_duals == pytest.approx([decision.price + 1e-6], abs=1e-3)


def test_point_outcome(make_game):
    game = make_game(zeta_f=0.8, spread=10.0, fcp=1.0, capacity=11.0)
    system = reduce_bilevel(game, TYPES)
    z = np.zeros(system.size)
    z[system.rho] = [1.0, 2.0]
    z[system.x] = [6.0, 4.5]
    z[system.mu_upper] = [1.0 + 2e-6, 0.0]
    z[system.nu_lower] = [0.5]

    # Award 4.5 sits below the 5 MW minimum.
    assert system.feasibility(z) == pytest.approx(0.5)
    z[system.x] = [6.0, 5.0]
    assert system.feasibility(z) == 0.0
    z[system.nu_lower] = [-0.5]
    assert system.feasibility(z) == pytest.approx(0.5)

    z[system.nu_lower] = [0.0]
    outcome = system.outcome(z)
    assert [offer.quantity_min for offer in outcome.instance.offers] == [5.0, 5.0]
    assert [offer.price for offer in outcome.instance.offers] == [1.0, 2.0]
    assert outcome.awards == pytest.approx([6.0, 5.0])
    assert outcome.flows == pytest.approx([11.0])
    assert outcome.upper_duals == pytest.approx([1.0 + 2e-6, 0.0])
    # Offer 2 sits on its minimum with a zero multiplier, so its stationarity row is off by ρ + tie.
    assert outcome.stationarity_residual == pytest.approx(2.0 + 1e-6)


def test_solve_infeasible(make_game):
    # Two 5 MW minimums on a 6 MW line.
    system = reduce_bilevel(make_game(), TYPES)
    with pytest.raises(InfeasibleError):
        solve_kkt(system)


def test_solve_lower_bounds(make_game):
    # Both want 6 MW but the line holds 11, so one award sits on its 5 MW minimum.
    game = make_game(zeta_f=0.8, spread=10.0, fcp=1.0, capacity=11.0, kkt_tolerance=1e-3)
    system = reduce_bilevel(game, TYPES)
    try:
        solution = solve_kkt(system)
    except NonconvergenceError as e:
        solution = e.solution
    awards = [result.decision.award for result in solution.results]
    assert all(5.0 <= award <= 6.0 for award in awards)
    assert sum(awards) <= 11.0 + 2 * solution.residuals["feasibility"] + 1e-9


def test_nonconvergence(single_player, mocker):
    system = reduce_bilevel(single_player, {("P1", "A"): OBLIGATION})
    mocker.patch.object(Game, "band_residual", return_value=1.0)
    with pytest.raises(NonconvergenceError) as exc_info:
        solve_kkt(system)
    assert exc_info.value.solution is not None
    assert exc_info.value.solution.residuals["band"] == 1.0
