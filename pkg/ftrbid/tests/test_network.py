"""
Tests the network model, shift factors and the DCOPF estimator.
"""
import numpy as np
import pytest

import ftrbid
from ftrbid import elements, network
from ftrbid.exceptions import InfeasibleDispatchError, SchemaError, TopologyError


def test_shift_factors_triangle(triangle):
    net, sens, _ = triangle
    assert net.slack_bus == 1
    # Slack column is zero.
    assert np.allclose(sens.shift_factors[:, net.slack_index], 0.0)
    assert sens.ptdf(net, 2, 3) == pytest.approx([-1 / 3, 1 / 3, 2 / 3])
    # Reversing a transfer flips every flow.
    assert sens.ptdf(net, 3, 2) == pytest.approx(-sens.ptdf(net, 2, 3))


def test_dcopf_uncongested(triangle):
    net, _, dispatch = triangle
    assert dispatch.gen_output == pytest.approx([60, 0], abs=1e-6)
    assert dispatch.line_flow == pytest.approx([20, 40, 20], abs=1e-6)
    assert dispatch.nodal_price == pytest.approx([10, 10, 10], abs=1e-6)
    assert dispatch.cost == pytest.approx(600)
    assert not dispatch.degenerate


def test_dcopf_congested(two_bus):
    net, _, dispatch = two_bus
    assert dispatch.gen_output == pytest.approx([20, 30], abs=1e-6)
    assert dispatch.line_flow == pytest.approx([20], abs=1e-6)
    assert dispatch.nodal_price == pytest.approx([10, 30], abs=1e-6)
    assert dispatch.spread(net, 1, 2) == pytest.approx(20)
    assert dispatch.total_output == pytest.approx(50)


def test_dcopf_custom_loads(two_bus):
    net, _, _ = two_bus
    dispatch = ftrbid.run_dcopf(net, [10])
    assert dispatch.gen_output == pytest.approx([10, 0], abs=1e-6)
    # Uncongested, so both buses see the cheap unit's cost.
    assert dispatch.nodal_price == pytest.approx([10, 10], abs=1e-6)

    with pytest.raises(ValueError):
        ftrbid.run_dcopf(net, [10, 20])


def test_dcopf_infeasible(two_bus_document):
    two_bus_document["loads"][0]["demand"] = 500
    net = ftrbid.build_network(two_bus_document)
    with pytest.raises(InfeasibleDispatchError):
        ftrbid.run_dcopf(net)

    # Enough generation but the line can't carry it.
    two_bus_document["loads"][0]["demand"] = 110
    two_bus_document["generators"][1]["p_max"] = 50
    net = ftrbid.build_network(two_bus_document)
    with pytest.raises(InfeasibleDispatchError):
        ftrbid.run_dcopf(net)


def test_build_network_validation(two_bus_document):
    document = dict(two_bus_document, lines=[{"id": 1, "from_bus": 1, "to_bus": 3, "reactance": 0.1, "capacity": 20}])
    with pytest.raises(TopologyError):
        ftrbid.build_network(document)

    document = dict(two_bus_document, lines=[])
    with pytest.raises(TopologyError, match="disconnected"):
        ftrbid.build_network(document)

    # Out of service lines don't connect anything.
    document = dict(
        two_bus_document,
        lines=[{"id": 1, "from_bus": 1, "to_bus": 2, "reactance": 0.1, "capacity": 20, "in_service": False}],
    )
    with pytest.raises(TopologyError, match="disconnected"):
        ftrbid.build_network(document)

    document = dict(two_bus_document, slack_bus=7)
    with pytest.raises(TopologyError):
        ftrbid.build_network(document)

    document = dict(two_bus_document, lines=[{"id": 1, "from_bus": 1, "to_bus": 2, "reactance": 0.1, "capacity": 0}])
    with pytest.raises(TopologyError):
        ftrbid.build_network(document)

    document = dict(two_bus_document)
    del document["buses"]
    with pytest.raises(SchemaError):
        ftrbid.build_network(document)


def test_default_slack(triangle_document):
    triangle_document["generators"] = [
        {"id": 1, "bus": 3, "cost": 10, "p_max": 100},
        {"id": 2, "bus": 2, "cost": 20, "p_max": 100},
    ]
    triangle_document["loads"] = [{"id": 1, "bus": 1, "demand": 60}]
    net = ftrbid.build_network(triangle_document)
    assert net.slack_bus == 2

    triangle_document["slack_bus"] = 3
    assert ftrbid.build_network(triangle_document).slack_bus == 3


def test_index_lookup(triangle):
    net, sens, _ = triangle
    assert net.bus_index(3) == 2
    assert net.line_index(2) == 1
    assert sens.shift_factor(net, 3, 1) == 0.0
    with pytest.raises(TopologyError):
        net.bus_index(9)
    with pytest.raises(TopologyError):
        net.generator_index(9)


def test_distribution_factors(two_bus):
    net, sens, dispatch = two_bus
    # D_sl = (20 - (0 * 20 - 1 * 30)) / 50
    assert network.slack_distribution_factor(net, sens, dispatch, 1) == pytest.approx(1.0)
    assert network.distribution_factor(net, sens, dispatch, 1, 1) == pytest.approx(1.0)
    assert network.distribution_factor(net, sens, dispatch, 2, 1) == pytest.approx(0.0)


def test_distribution_factors_sum_to_flow(eight_bus):
    net = ftrbid.build_network(eight_bus)
    sens = ftrbid.compute_shift_factors(net)
    dispatch = ftrbid.run_dcopf(net)
    sens = sens.with_dispatch(net, dispatch)
    assert sens.distribution_factors @ dispatch.gen_output == pytest.approx(dispatch.line_flow, abs=1e-6)


def test_updated_flow_capping(two_bus):
    net, sens, dispatch = two_bus
    # Line 1 is at its limit, so extra output at bus 1 serving bus 2 is pinned.
    assert network.updated_flow(net, sens, dispatch, 1, 1, 1, 5.0) == (pytest.approx(20.0), True)
    # Backing down the cheap unit relieves the line.
    assert network.updated_flow(net, sens, dispatch, 1, 1, 1, -5.0) == (pytest.approx(15.0), False)
    # Generator 2 sits at the load's bus and moves nothing.
    assert network.updated_flow(net, sens, dispatch, 1, 2, 1, 5.0) == (pytest.approx(20.0), False)


def test_update_slack_factor(two_bus):
    net, sens, dispatch = two_bus
    d_sl = sens.slack_factors[0]
    total = dispatch.total_output
    a_d = sens.shift_factor(net, 1, 2)

    # Uncapped: (D * P - A_d * delta) / (P + delta)
    expected = (d_sl * total - a_d * 5.0) / (total + 5.0)
    assert network.update_slack_factor(net, sens, dispatch, 1, 2, 1, 5.0) == pytest.approx(expected)

    # Capped: (D * P + (limit - flow - A_j * delta)) / (P + delta)
    expected = (d_sl * total + (20.0 - 20.0 - 0.0 * 5.0)) / (total + 5.0)
    assert network.update_slack_factor(net, sens, dispatch, 1, 1, 1, 5.0) == pytest.approx(expected)


def test_update_slack_factor_from_scratch(eight_bus):
    net = ftrbid.build_network(eight_bus)
    sens = ftrbid.compute_shift_factors(net)
    dispatch = ftrbid.run_dcopf(net)
    rng = np.random.default_rng(7)
    gen_buses = [net.bus_index(gen.bus) for gen in net.generators]
    capped = uncapped = 0
    for _ in range(1000):
        line = net.lines[rng.integers(len(net.lines))]
        j = int(rng.integers(len(net.generators)))
        d = int(rng.integers(len(net.loads)))
        delta = float(rng.uniform(-30.0, 30.0))
        row = sens.shift_factors[net.line_index(line.id)]
        limit = net.capacity[net.line_index(line.id)]

        output = dispatch.gen_output.copy()
        output[j] += delta
        moved = dispatch.line_flow[net.line_index(line.id)] + (
            row[gen_buses[j]] - row[net.bus_index(net.loads[d].bus)]
        ) * delta
        flow = float(np.clip(moved, -limit, limit))
        if flow != moved:
            capped += 1
        else:
            uncapped += 1
        expected = (flow - row[gen_buses] @ output) / output.sum()

        actual = network.update_slack_factor(
            net, sens, dispatch, line.id, net.generators[j].id, net.loads[d].id, delta
        )
        assert actual == pytest.approx(expected, rel=0, abs=1e-10)
    assert capped > 20 and uncapped > 500


def test_resolve_paths(two_bus):
    net, sens, dispatch = two_bus
    specs = [
        elements.PathSpec(line=1),
        elements.PathSpec(line=1, name="reverse", source=2, sink=1),
    ]
    forward, reverse = ftrbid.resolve_paths(net, sens, dispatch, specs)
    assert (forward.name, forward.source, forward.sink, forward.orientation) == ("line1", 1, 2, 1.0)
    assert (reverse.source, reverse.sink, reverse.orientation) == (2, 1, -1.0)
    assert dispatch.path_estimate(net, forward) == pytest.approx(20.0)
    assert dispatch.path_estimate(net, reverse) == pytest.approx(-20.0)

    dispatch = dispatch.with_paths(net, [forward, reverse])
    assert dispatch.path_spread == {"line1": pytest.approx(20.0), "reverse": pytest.approx(-20.0)}

    with pytest.raises(TopologyError):
        ftrbid.resolve_paths(net, sens, dispatch, [elements.PathSpec(line=1), elements.PathSpec(line=1)])
    with pytest.raises(TopologyError):
        ftrbid.resolve_paths(net, sens, dispatch, [elements.PathSpec(line=1, source=1)])
    with pytest.raises(TopologyError):
        ftrbid.resolve_paths(net, sens, dispatch, [elements.PathSpec(line=4)])


@pytest.mark.parametrize("seed", range(5))
def test_random_networks(make_network_document, seed):
    net = ftrbid.build_network(make_network_document(seed=seed))
    sens = ftrbid.compute_shift_factors(net)
    dispatch = ftrbid.run_dcopf(net)
    sens = sens.with_dispatch(net, dispatch)

    assert dispatch.total_output == pytest.approx(sum(load.demand for load in net.loads))
    assert np.all(np.abs(dispatch.line_flow) <= net.capacity + 1e-6)
    assert sens.distribution_factors @ dispatch.gen_output == pytest.approx(dispatch.line_flow, abs=1e-6)
    # Slack column of the shift factors is zero.
    assert sens.shift_factors[:, net.bus_index(net.slack_bus)] == pytest.approx(0.0)
