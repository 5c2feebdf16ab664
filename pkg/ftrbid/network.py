"""
DC network representation, power-flow sensitivity factors and the DCOPF energy market estimator.
"""
import functools
import logging
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import attr
import networkx as nx
import numpy as np
from scipy.optimize import linprog

from ftrbid import elements
from ftrbid.exceptions import (
    InfeasibleDispatchError,
    SchemaError,
    SingularNetworkError,
    SolverError,
    TopologyError,
    UnboundedError,
    ZeroDispatchError,
)

logger = logging.getLogger(__name__)

# scipy.optimize.linprog status codes
LP_INFEASIBLE = 2
LP_UNBOUNDED = 3

# Condition number above which the reduced susceptance matrix is treated as singular.
MAX_CONDITION = 1e12


@attr.s(frozen=True, auto_attribs=True, eq=False)
class NetworkModel:
    """
    Validated DC network. Only in-service lines are kept.

    :var buses: Network buses, in document order.
    :var lines: In-service lines.
    :var generators: Generators.
    :var loads: Loads.
    :var slack_bus: Id of the reference bus.
    """
    buses: Tuple[elements.Bus, ...]
    lines: Tuple[elements.Line, ...]
    generators: Tuple[elements.Generator, ...]
    loads: Tuple[elements.Load, ...]
    slack_bus: int

    @functools.cached_property
    def _bus_positions(self) -> Dict[int, int]:
        return {bus.id: index for index, bus in enumerate(self.buses)}

    @functools.cached_property
    def _line_positions(self) -> Dict[int, int]:
        return {line.id: index for index, line in enumerate(self.lines)}

    @functools.cached_property
    def _generator_positions(self) -> Dict[int, int]:
        return {gen.id: index for index, gen in enumerate(self.generators)}

    @functools.cached_property
    def _load_positions(self) -> Dict[int, int]:
        return {load.id: index for index, load in enumerate(self.loads)}

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._bus_positions[bus_id]
        except KeyError:
            raise TopologyError(f"Unknown bus {bus_id}")

    def line_index(self, line_id: int) -> int:
        try:
            return self._line_positions[line_id]
        except KeyError:
            raise TopologyError(f"Unknown or out of service line {line_id}")

    def generator_index(self, generator_id: int) -> int:
        try:
            return self._generator_positions[generator_id]
        except KeyError:
            raise TopologyError(f"Unknown generator {generator_id}")

    def load_index(self, load_id: int) -> int:
        try:
            return self._load_positions[load_id]
        except KeyError:
            raise TopologyError(f"Unknown load {load_id}")

    @property
    def slack_index(self) -> int:
        return self.bus_index(self.slack_bus)

    @functools.cached_property
    def capacity(self) -> np.ndarray:
        return np.array([line.capacity for line in self.lines], dtype=float)

    @functools.cached_property
    def demand(self) -> np.ndarray:
        return np.array([load.demand for load in self.loads], dtype=float)

    @functools.cached_property
    def generator_buses(self) -> np.ndarray:
        """Bus position of every generator."""
        return np.array([self.bus_index(gen.bus) for gen in self.generators], dtype=int)

    @functools.cached_property
    def load_buses(self) -> np.ndarray:
        """Bus position of every load."""
        return np.array([self.bus_index(load.bus) for load in self.loads], dtype=int)

    @functools.cached_property
    def branch_susceptance(self) -> np.ndarray:
        """
        Line-by-bus matrix mapping bus angles to line flows.
        """
        bf = np.zeros((len(self.lines), len(self.buses)))
        for index, line in enumerate(self.lines):
            b = 1.0 / line.reactance
            bf[index, self.bus_index(line.from_bus)] = b
            bf[index, self.bus_index(line.to_bus)] = -b
        return bf

    @functools.cached_property
    def bus_susceptance(self) -> np.ndarray:
        """
        Bus susceptance matrix B (injection = B @ angles).
        """
        incidence = np.zeros((len(self.lines), len(self.buses)))
        for index, line in enumerate(self.lines):
            incidence[index, self.bus_index(line.from_bus)] = 1.0
            incidence[index, self.bus_index(line.to_bus)] = -1.0
        return incidence.T @ self.branch_susceptance

    def graph(self) -> nx.MultiGraph:
        graph = nx.MultiGraph()
        graph.add_nodes_from(bus.id for bus in self.buses)
        graph.add_edges_from((line.from_bus, line.to_bus, {"id": line.id}) for line in self.lines)
        return graph


@attr.s(frozen=True, auto_attribs=True, eq=False)
class Path:
    """
    Resolved FTR path.

    :var name: Path name.
    :var line: Id of the monitored line.
    :var source: Source bus id.
    :var sink: Sink bus id.
    :var orientation: +1 if the path's transfer pushes the monitored line in its from->to direction, else -1.
    """
    name: str
    line: int
    source: int
    sink: int
    orientation: float = 1.0


@attr.s(frozen=True, auto_attribs=True, eq=False)
class SensitivityMatrices:
    """
    Power flow sensitivities of a network.

    :var shift_factors: Generalized shift factors A per (line, bus), zero for the slack column.
    :var slack_factors: Slack distribution factor D_sl per line. (requires a dispatch)
    :var distribution_factors: Generation distribution factors D per (line, generator). (requires a dispatch)
    """
    shift_factors: np.ndarray
    slack_factors: Optional[np.ndarray] = None
    distribution_factors: Optional[np.ndarray] = None

    def ptdf(self, net: NetworkModel, source: int, sink: int) -> np.ndarray:
        """
        Flow induced on every line by a 1 MW transfer from source bus to sink bus.
        """
        return self.shift_factors[:, net.bus_index(source)] - self.shift_factors[:, net.bus_index(sink)]

    def shift_factor(self, net: NetworkModel, line_id: int, bus_id: int) -> float:
        return float(self.shift_factors[net.line_index(line_id), net.bus_index(bus_id)])

    def with_dispatch(self, net: NetworkModel, dispatch: "DispatchEstimate") -> "SensitivityMatrices":
        """
        Returns a copy with the dispatch dependent distribution factors filled in.
        """
        slack = _slack_factors(net, self, dispatch)
        distribution = slack[:, np.newaxis] + self.shift_factors[:, net.generator_buses]
        return attr.evolve(self, slack_factors=slack, distribution_factors=distribution)


@attr.s(frozen=True, auto_attribs=True, eq=False)
class DispatchEstimate:
    """
    DC optimal power flow result.

    :var gen_output: Output per generator (MW).
    :var line_flow: Signed flow per line (MW), positive from -> to.
    :var nodal_price: Locational marginal price per bus (currency/MWh).
    :var demand: Demand per load the dispatch was solved for (MW).
    :var cost: Total dispatch cost (currency/h).
    :var degenerate: Whether the optimal basis looked degenerate. (duals may not be unique)
    :var path_spread: Price spread per path name, sink minus source (currency/MWh).
    """
    gen_output: np.ndarray
    line_flow: np.ndarray
    nodal_price: np.ndarray
    demand: np.ndarray
    cost: float
    degenerate: bool = False
    path_spread: Dict[str, float] = attr.ib(factory=dict)

    @property
    def total_output(self) -> float:
        return float(np.sum(self.gen_output))

    def spread(self, net: NetworkModel, source: int, sink: int) -> float:
        """
        Price spread λ_sink - λ_source. Positive means an FTR from source to sink collects congestion rent.
        """
        return float(self.nodal_price[net.bus_index(sink)] - self.nodal_price[net.bus_index(source)])

    def path_estimate(self, net: NetworkModel, path: Path) -> float:
        """
        Estimated flow of the monitored line measured in the path's direction.
        """
        return float(path.orientation * self.line_flow[net.line_index(path.line)])

    def with_paths(self, net: NetworkModel, paths: Iterable[Path]) -> "DispatchEstimate":
        return attr.evolve(
            self, path_spread={path.name: self.spread(net, path.source, path.sink) for path in paths}
        )


def build_network(document: Union[dict, elements.ScenarioConfig]) -> NetworkModel:
    """
    Builds a validated network from a scenario document.

    :param document: Scenario document as a dictionary or an already structured ScenarioConfig.
    :return: NetworkModel
    :raises SchemaError: If the document is malformed.
    :raises TopologyError: If the network is disconnected or references unknown buses.
    """
    if isinstance(document, dict):
        elements.validate_document(document)
        document = elements.ScenarioConfig.from_dict(document)

    bus_ids = [bus.id for bus in document.buses]
    if not bus_ids:
        raise TopologyError("Network has no buses.")
    if len(set(bus_ids)) != len(bus_ids):
        raise TopologyError("Duplicate bus ids.")
    known = set(bus_ids)

    for kind, items in (("line", document.lines), ("generator", document.generators), ("load", document.loads)):
        ids = [item.id for item in items]
        if len(set(ids)) != len(ids):
            raise TopologyError(f"Duplicate {kind} ids.")

    for line in document.lines:
        for bus in (line.from_bus, line.to_bus):
            if bus not in known:
                raise TopologyError(f"Line {line.id} references unknown bus {bus}")
        if line.from_bus == line.to_bus:
            raise TopologyError(f"Line {line.id} connects bus {line.from_bus} to itself.")
        if line.capacity <= 0:
            raise TopologyError(f"Line {line.id} capacity must be positive, got {line.capacity}")
        if line.reactance == 0:
            raise TopologyError(f"Line {line.id} reactance must be nonzero.")

    for gen in document.generators:
        if gen.bus not in known:
            raise TopologyError(f"Generator {gen.id} references unknown bus {gen.bus}")
        if gen.p_min > gen.p_max:
            raise SchemaError(f"Generator {gen.id} has p_min {gen.p_min} above p_max {gen.p_max}")

    for load in document.loads:
        if load.bus not in known:
            raise TopologyError(f"Load {load.id} references unknown bus {load.bus}")
        if not 0 <= load.omega_up <= 1:
            raise SchemaError(f"Load {load.id} omega_up must be within [0, 1], got {load.omega_up}")
        if load.deviation is not None and load.deviation < 0:
            raise SchemaError(f"Load {load.id} deviation must not be negative.")

    slack_bus = document.slack_bus
    if slack_bus is None:
        slack_bus = min((gen.bus for gen in document.generators), default=min(bus_ids))
    elif slack_bus not in known:
        raise TopologyError(f"Slack bus {slack_bus} doesn't exist.")

    net = NetworkModel(
        buses=tuple(document.buses),
        lines=tuple(line for line in document.lines if line.in_service),
        generators=tuple(document.generators),
        loads=tuple(document.loads),
        slack_bus=slack_bus,
    )
    if not nx.is_connected(net.graph()):
        islands = [sorted(component) for component in nx.connected_components(net.graph())]
        raise TopologyError(f"Network is disconnected: {islands}")

    logger.debug(
        f"Built network with {len(net.buses)} buses, {len(net.lines)} lines, "
        f"{len(net.generators)} generators and {len(net.loads)} loads (slack bus {slack_bus})."
    )
    return net


def compute_shift_factors(net: NetworkModel) -> SensitivityMatrices:
    """
    Computes the generalized shift factors A with respect to the slack bus.

    :raises SingularNetworkError: If the reduced susceptance matrix isn't invertible.
    """
    n = len(net.buses)
    slack = net.slack_index
    keep = [index for index in range(n) if index != slack]

    reactance = np.zeros((n, n))
    if keep:
        reduced = net.bus_susceptance[np.ix_(keep, keep)]
        try:
            if np.linalg.cond(reduced) > MAX_CONDITION:
                raise np.linalg.LinAlgError("ill-conditioned")
            reactance[np.ix_(keep, keep)] = np.linalg.inv(reduced)
        except np.linalg.LinAlgError as e:
            raise SingularNetworkError(f"Reduced susceptance matrix is singular: {e}")

    shift_factors = net.branch_susceptance @ reactance
    shift_factors[:, slack] = 0.0
    return SensitivityMatrices(shift_factors=shift_factors)


def run_dcopf(
        net: NetworkModel,
        loads: Optional[Sequence[float]] = None,
        *,
        paths: Iterable[Path] = (),
        tolerance: float = 1e-9,
) -> DispatchEstimate:
    """
    Solves the lossless DC optimal power flow as a linear program over generator outputs and bus angles.

    :param net: Network to dispatch.
    :param loads: Demand per load in MW. (defaults to nominal demand)
    :param paths: Paths to compute price spreads for.
    :param tolerance: Primal/dual feasibility tolerance passed to HiGHS.
    :return: DispatchEstimate with prices taken from the nodal balance duals.
    :raises InfeasibleDispatchError: If no dispatch satisfies demand and line limits.
    :raises UnboundedError: If the costs make the problem unbounded.
    """
    demand = net.demand if loads is None else np.asarray(loads, dtype=float)
    if demand.shape != (len(net.loads),):
        raise ValueError(f"Expected {len(net.loads)} load values, got {demand.shape}")

    p_min = np.array([gen.p_min for gen in net.generators], dtype=float)
    p_max = np.array([gen.p_max for gen in net.generators], dtype=float)
    total = float(demand.sum())
    if total > p_max.sum() + tolerance or total < p_min.sum() - tolerance:
        raise InfeasibleDispatchError(
            f"Demand of {total:.4f} MW outside of generation range [{p_min.sum():.4f}, {p_max.sum():.4f}]"
        )

    n_gen = len(net.generators)
    n_bus = len(net.buses)
    n_line = len(net.lines)

    bus_demand = np.zeros(n_bus)
    np.add.at(bus_demand, net.load_buses, demand)

    placement = np.zeros((n_bus, n_gen))
    placement[net.generator_buses, np.arange(n_gen)] = 1.0

    # Nodal balance rows followed by the reference angle row.
    a_eq = np.zeros((n_bus + 1, n_gen + n_bus))
    a_eq[:n_bus, :n_gen] = placement
    a_eq[:n_bus, n_gen:] = -net.bus_susceptance
    a_eq[n_bus, n_gen + net.slack_index] = 1.0
    b_eq = np.append(bus_demand, 0.0)

    bf = net.branch_susceptance
    a_ub = np.zeros((2 * n_line, n_gen + n_bus))
    a_ub[:n_line, n_gen:] = bf
    a_ub[n_line:, n_gen:] = -bf
    b_ub = np.concatenate([net.capacity, net.capacity])

    cost = np.concatenate([[gen.cost for gen in net.generators], np.zeros(n_bus)])
    bounds = list(zip(p_min, p_max)) + [(None, None)] * n_bus

    result = linprog(
        cost,
        A_ub=a_ub if n_line else None,
        b_ub=b_ub if n_line else None,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs-ds",
        options={"primal_feasibility_tolerance": tolerance, "dual_feasibility_tolerance": tolerance},
    )
    if result.status == LP_INFEASIBLE:
        raise InfeasibleDispatchError(f"DCOPF infeasible: {result.message}")
    if result.status == LP_UNBOUNDED:
        raise UnboundedError(f"DCOPF unbounded: {result.message}")
    if result.status != 0:
        raise SolverError(f"DCOPF failed: {result.message}")

    gen_output = result.x[:n_gen]
    angles = result.x[n_gen:]
    line_flow = bf @ angles
    nodal_price = np.asarray(result.eqlin.marginals[:n_bus], dtype=float)

    # A vertex of this LP has n_gen - 1 active inequalities.
    slack_tol = 1e-7
    at_bounds = np.sum(np.isclose(gen_output, p_min, atol=slack_tol)) + np.sum(np.isclose(gen_output, p_max, atol=slack_tol))
    at_limit = np.sum(np.abs(line_flow) >= net.capacity - slack_tol)
    degenerate = bool(at_bounds + at_limit != n_gen - 1)
    if degenerate:
        logger.debug(f"DCOPF basis is degenerate ({at_bounds + at_limit} active constraints for {n_gen} generators).")

    dispatch = DispatchEstimate(
        gen_output=gen_output,
        line_flow=line_flow,
        nodal_price=nodal_price,
        demand=demand,
        cost=float(result.fun),
        degenerate=degenerate,
    )
    if paths:
        dispatch = dispatch.with_paths(net, paths)
    return dispatch


def _slack_factors(net: NetworkModel, sens: SensitivityMatrices, dispatch: DispatchEstimate) -> np.ndarray:
    total = dispatch.total_output
    if total <= 0:
        raise ZeroDispatchError(f"Total generator output must be positive, got {total}")
    injection = sens.shift_factors[:, net.generator_buses] @ dispatch.gen_output
    return (dispatch.line_flow - injection) / total


def slack_distribution_factor(
        net: NetworkModel, sens: SensitivityMatrices, dispatch: DispatchEstimate, line_id: int
) -> float:
    """
    Generalized generation distribution factor of the slack for one line:
    D_sl = (flow - sum(A_i * p_i)) / sum(p_i), the slack generators contributing nothing to the sum.

    :raises ZeroDispatchError: If the total output isn't positive.
    """
    return float(_slack_factors(net, sens, dispatch)[net.line_index(line_id)])


def updated_flow(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        line_id: int,
        generator_id: int,
        load_id: int,
        delta: float,
) -> Tuple[float, bool]:
    """
    Flow on a line after generator j serves an extra `delta` MW of load d, pinned at the line limit.

    :return: (flow, whether the flow was capped)
    """
    line = net.line_index(line_id)
    limit = net.capacity[line]
    flow = dispatch.line_flow[line]
    a_j = sens.shift_factors[line, net.bus_index(net.generators[net.generator_index(generator_id)].bus)]
    a_d = sens.shift_factors[line, net.bus_index(net.loads[net.load_index(load_id)].bus)]
    change = (a_j - a_d) * delta
    if change - (limit - flow) > 0:
        return float(limit), True
    if change + (limit + flow) < 0:
        return float(-limit), True
    return float(flow + change), False


def update_slack_factor(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        line_id: int,
        generator_id: int,
        load_id: int,
        delta: float,
) -> float:
    """
    Slack distribution factor after generator j changes its output by `delta` MW to follow load d.

    Uses the closed form D' = (D * P - A_d * delta) / (P + delta) while the new flow fits within
    the line limit, and D' = (D * P + (limit - flow - A_j * delta)) / (P + delta) once the flow is
    pinned at the limit (with -limit for flows pushed past the reverse limit).

    :raises ZeroDispatchError: If the total output after the change isn't positive.
    """
    line = net.line_index(line_id)
    total = dispatch.total_output
    if total + delta <= 0:
        raise ZeroDispatchError(f"Total generator output must stay positive, got {total + delta}")

    generator = net.generators[net.generator_index(generator_id)]
    load = net.loads[net.load_index(load_id)]
    a_j = sens.shift_factors[line, net.bus_index(generator.bus)]
    a_d = sens.shift_factors[line, net.bus_index(load.bus)]
    current = _slack_factors(net, sens, dispatch)[line]

    p_j = dispatch.gen_output[net.generator_index(generator_id)]
    if not generator.p_min - 1e-9 <= p_j + delta <= generator.p_max + 1e-9:
        logger.debug(f"Generator {generator_id} moved outside of its limits by a {delta} MW change.")

    new_flow, capped = updated_flow(net, sens, dispatch, line_id, generator_id, load_id, delta)
    if not capped:
        return float((current * total - a_d * delta) / (total + delta))
    flow = dispatch.line_flow[line]
    return float((current * total + (new_flow - flow - a_j * delta)) / (total + delta))


def distribution_factor(
        net: NetworkModel, sens: SensitivityMatrices, dispatch: DispatchEstimate, generator_id: int, line_id: int
) -> float:
    """
    Generation distribution factor D = D_sl + A of a generator on a line.
    """
    line = net.line_index(line_id)
    generator = net.generators[net.generator_index(generator_id)]
    return float(_slack_factors(net, sens, dispatch)[line] + sens.shift_factors[line, net.bus_index(generator.bus)])


def resolve_paths(
        net: NetworkModel,
        sens: SensitivityMatrices,
        dispatch: DispatchEstimate,
        path_specs: Iterable[elements.PathSpec],
) -> Tuple[Path, ...]:
    """
    Resolves the configured paths against the base dispatch.
    Missing source/sink buses are taken from the monitored line, oriented along its base flow.

    :raises TopologyError: If a path names an unknown line or bus.
    """
    paths = []
    names = set()
    for path_spec in path_specs:
        line = net.lines[net.line_index(path_spec.line)]
        name = path_spec.name or f"line{path_spec.line}"
        if name in names:
            raise TopologyError(f"Duplicate path name {name}")
        names.add(name)

        source, sink = path_spec.source, path_spec.sink
        if source is None or sink is None:
            if source is not None or sink is not None:
                raise TopologyError(f"Path {name} must give both source and sink or neither.")
            if dispatch.line_flow[net.line_index(line.id)] >= 0:
                source, sink = line.from_bus, line.to_bus
            else:
                source, sink = line.to_bus, line.from_bus
        if source == sink:
            raise TopologyError(f"Path {name} has the same source and sink.")

        own_factor = sens.ptdf(net, source, sink)[net.line_index(line.id)]
        orientation = -1.0 if own_factor < 0 else 1.0
        paths.append(Path(name=name, line=line.id, source=source, sink=sink, orientation=orientation))
    return tuple(paths)
