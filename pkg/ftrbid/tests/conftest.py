import copy
from importlib import resources

import numpy as np
import pytest

import ftrbid
from ftrbid import elements
from ftrbid.equilibrium import Game, PathTerms, PlayerProblem


def pytest_configure(config):
    """
    Registers custom markers.
    """
    config.addinivalue_line("markers", "slow: full size equilibrium runs")


@pytest.fixture(autouse=True)
def reset_config():
    """Ensures configuration is reset for each test."""
    ftrbid.config.clear()
    yield
    ftrbid.config.clear()


# Congested two bus system: the 20 MW line holds back the cheap unit at bus 1.
TWO_BUS = {
    "name": "two_bus",
    "buses": [{"id": 1}, {"id": 2}],
    "lines": [{"id": 1, "from_bus": 1, "to_bus": 2, "reactance": 0.1, "capacity": 20}],
    "generators": [
        {"id": 1, "bus": 1, "cost": 10, "p_max": 100},
        {"id": 2, "bus": 2, "cost": 30, "p_max": 100},
    ],
    "loads": [{"id": 1, "bus": 2, "demand": 50}],
    "players": [{"name": "P1", "generators": [1]}, {"name": "P2", "generators": [2]}],
    "paths": [{"name": "line1", "line": 1}],
}


# Triangle with equal reactances and ample capacity.
TRIANGLE = {
    "name": "triangle",
    "buses": [{"id": 1}, {"id": 2}, {"id": 3}],
    "lines": [
        {"id": 1, "from_bus": 1, "to_bus": 2, "reactance": 0.1, "capacity": 100},
        {"id": 2, "from_bus": 1, "to_bus": 3, "reactance": 0.1, "capacity": 100},
        {"id": 3, "from_bus": 2, "to_bus": 3, "reactance": 0.1, "capacity": 100},
    ],
    "generators": [
        {"id": 1, "bus": 1, "cost": 10, "p_max": 100},
        {"id": 2, "bus": 2, "cost": 20, "p_max": 100},
    ],
    "loads": [{"id": 1, "bus": 3, "demand": 60}],
    "players": [{"name": "P1", "generators": [1]}, {"name": "P2", "generators": [2]}],
    "paths": [{"line": 2}],
}


@pytest.fixture
def two_bus_document():
    return copy.deepcopy(TWO_BUS)


@pytest.fixture
def triangle_document():
    return copy.deepcopy(TRIANGLE)


@pytest.fixture
def two_bus():
    """Network, sensitivities and base dispatch of the two bus system."""
    net = ftrbid.build_network(copy.deepcopy(TWO_BUS))
    sens = ftrbid.compute_shift_factors(net)
    dispatch = ftrbid.run_dcopf(net)
    return net, sens.with_dispatch(net, dispatch), dispatch


@pytest.fixture
def triangle():
    net = ftrbid.build_network(copy.deepcopy(TRIANGLE))
    sens = ftrbid.compute_shift_factors(net)
    dispatch = ftrbid.run_dcopf(net)
    return net, sens.with_dispatch(net, dispatch), dispatch


@pytest.fixture
def eight_bus():
    """The builtin eight bus scenario with small grids."""
    return ftrbid.load_scenario("eight_bus", {"grid_resolution": 3, "max_rounds": 10, "solve_kkt": False})


@pytest.fixture
def config_path():
    """Path to the packaged configuration file."""
    return str(resources.files("ftrbid.config").joinpath("config.yml"))


@pytest.fixture
def make_game():
    """
    Creates a single path game where every player holds identical terms.
    """
    def _make_game(
            players=("P1", "P2"),
            capacity=6.0,
            quantity=5.0,
            zeta_f=1.0,
            spread=4.0,
            fcp=0.0,
            rcp=0.0,
            ftr_min=None,
            grid_resolution=5,
            **options,
    ) -> Game:
        problems = tuple(
            PlayerProblem(name=name, terms=(PathTerms(
                player=name,
                path="A",
                share=quantity,
                fcp=fcp,
                rcp=rcp,
                ftr_min=quantity - abs(rcp) if ftr_min is None else ftr_min,
                ftr_max=quantity + fcp,
                zeta_f=zeta_f,
                zeta_r=1.0 - zeta_f,
                spread=spread,
            ),))
            for name in players
        )
        return Game(
            players=problems,
            path_impacts={"A": np.array([1.0])},
            limits=np.array([capacity]),
            line_ids=(1,),
            options=elements.SolverOptions(grid_resolution=grid_resolution, **options),
        )

    return _make_game


@pytest.fixture
def make_network_document():
    """
    Creates a random connected network: a ring of buses with a few extra chords,
    generators on even buses and loads on odd buses.
    """
    def _make_network_document(n_bus=6, seed=0, extra_lines=3) -> dict:
        rng = np.random.default_rng(seed)
        edges = [(bus, bus % n_bus + 1) for bus in range(1, n_bus + 1)]
        while len(edges) < n_bus + extra_lines:
            a, b = sorted(int(bus) for bus in rng.choice(np.arange(1, n_bus + 1), size=2, replace=False))
            if (a, b) not in edges and (b, a) not in edges:
                edges.append((a, b))
        gen_buses = list(range(2, n_bus + 1, 2))
        load_buses = list(range(1, n_bus + 1, 2))
        return {
            "name": f"random_{seed}",
            "buses": [{"id": bus} for bus in range(1, n_bus + 1)],
            "lines": [
                {
                    "id": index,
                    "from_bus": a,
                    "to_bus": b,
                    "reactance": float(rng.uniform(0.05, 0.2)),
                    "capacity": float(rng.uniform(40, 120)),
                }
                for index, (a, b) in enumerate(edges, start=1)
            ],
            "generators": [
                {"id": index, "bus": bus, "cost": float(rng.uniform(10, 40)), "p_max": 150.0}
                for index, bus in enumerate(gen_buses, start=1)
            ],
            "loads": [
                {"id": index, "bus": bus, "demand": float(rng.uniform(10, 30))}
                for index, bus in enumerate(load_buses, start=1)
            ],
            "players": [
                {"name": f"P{index}", "generators": [index]} for index in range(1, len(gen_buses) + 1)
            ],
            "paths": [{"line": 1}, {"line": 2}],
        }

    return _make_network_document
