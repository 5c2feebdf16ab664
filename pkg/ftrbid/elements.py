"""
Typed elements of a scenario document.

- Using attrs for ease of use and validation.
"""
import functools
import json
import logging
import pathlib
import typing
from importlib import resources
from typing import Any, List, Optional, Type, TypeVar, Union

import attr
import cattr
import jsonschema
import numpy as np

from ftrbid.exceptions import SchemaError

logger = logging.getLogger(__name__)


cattr = cattr.GenConverter(prefer_attrib_converters=True)

# Register support for pathlib.
cattr.register_structure_hook(pathlib.Path, lambda d, t: pathlib.Path(d))
cattr.register_unstructure_hook(pathlib.Path, str)

# Register support for numpy values found in results.
cattr.register_structure_hook(np.ndarray, lambda d, t: np.asarray(d, dtype=float))
cattr.register_unstructure_hook(np.ndarray, lambda d: d.tolist())
cattr.register_unstructure_hook(np.floating, float)
cattr.register_unstructure_hook(np.integer, int)
cattr.register_unstructure_hook(np.bool_, bool)


T = TypeVar("T")


def _cast(value: Any, type_: Type[T]) -> T:
    """
    Casts given value to the given type.
    Usually uses cattr.structure()

    :param value: Value to cast.
    :param type_: Type to cast to.
        (For things like Optional, the inner type is used.)
    :return: Converted value.
    """
    if typing.get_origin(type_) is Union:
        if type(value) in type_.__args__:
            return value
        for sub_type in type_.__args__:
            if sub_type is type(None):
                continue
            try:
                return _cast(value, sub_type)
            except Exception:
                continue
        raise ValueError("No subtypes matched.")

    # Already-structured elements (e.g. factory defaults) pass through as is.
    if attr.has(type_) and isinstance(value, type_):
        return value
    if typing.get_origin(type_) is list and isinstance(value, list):
        (item_type,) = typing.get_args(type_)
        return [_cast(item, item_type) for item in value]

    # Don't let bool sneak through as a number or a number as a bool.
    if type_ in (int, float) and isinstance(value, bool):
        raise ValueError(f"Expected a number, got {value!r}")
    if type_ is bool and not isinstance(value, bool):
        raise ValueError(f"Expected a boolean, got {value!r}")
    if type_ is int and isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"Expected an integer, got {value!r}")
        return int(value)

    return cattr.structure(value, type_)


def _auto_convert(cls, fields):
    """
    Automatically applies type coercion to all fields.
    (This also acts as validation)
    """
    def converter(field_type):
        def _wrapper(v):
            if v is None:
                return v
            try:
                return _cast(v, field_type)
            except SchemaError:
                raise
            except Exception as e:
                raise SchemaError(f"Failed to cast {v!r} to {field_type} with error: {e}")
        return _wrapper

    new_fields = []
    for field in fields:
        if field.converter is None and field.type:
            field = field.evolve(converter=converter(field.type))
        new_fields.append(field)
    return new_fields


def _strip_null(d: dict) -> dict:
    """
    Strips away any entries that have the value None.
    """
    return {key: value for key, value in d.items() if value is not None}


config = dict(auto_attribs=True, field_transformer=_auto_convert)


@attr.s(**config)
class Element:
    """
    Base class for scenario document elements.
    These should be created using attr for convenience.
    """

    @classmethod
    def fields(cls):
        return attr.fields(cls)

    @classmethod
    def from_dict(cls: Type[T], obj: dict) -> T:
        """
        Structures the element from a plain dictionary.

        :raises SchemaError: If a field is missing or can't be cast.
        """
        if not isinstance(obj, dict):
            raise SchemaError(f"Expected a mapping for {cls.__name__}, got {type(obj).__name__}")
        try:
            return cattr.structure(_strip_null(obj), cls)
        except SchemaError:
            raise
        except Exception as e:
            raise SchemaError(f"Invalid {cls.__name__}: {e}")

    def as_dict(self) -> dict:
        return cattr.unstructure(self)

    def as_json(self) -> str:
        return json.dumps(self.as_dict(), indent=4)

    def validate(self):
        attr.validate(self)


@attr.s(**config)
class Bus(Element):
    """
    Network node.

    :var id: Bus number used by lines, generators and loads.
    :var name: Optional display name.
    """
    id: int
    name: Optional[str] = None


@attr.s(**config)
class Line(Element):
    """
    Transmission line between two buses.

    :var id: Line number. (e.g. 10 for "line 10")
    :var from_bus: Bus the positive flow direction starts from.
    :var to_bus: Bus the positive flow direction ends at.
    :var reactance: Series reactance in p.u.
    :var capacity: Thermal limit in MW.
    :var in_service: Out of service lines are ignored.
    """
    id: int
    from_bus: int
    to_bus: int
    reactance: float
    capacity: float
    in_service: bool = True


@attr.s(**config)
class Generator(Element):
    """
    Dispatchable generator with a single-segment marginal cost.

    :var id: Generator number.
    :var bus: Bus the generator is connected to.
    :var cost: Marginal cost in currency/MWh.
    :var p_max: Maximum output in MW.
    :var p_min: Minimum output in MW.
    """
    id: int
    bus: int
    cost: float
    p_max: float
    p_min: float = 0.0


@attr.s(**config)
class Load(Element):
    """
    Fixed demand with a two-point deviation model.

    :var id: Load number.
    :var bus: Bus the load is connected to.
    :var demand: Nominal demand in MW.
    :var omega_up: Probability of an increment. (the decrement gets 1 - omega_up)
    :var deviation: Deviation magnitude in MW. (defaults to the scenario's deviation fraction of demand)
    """
    id: int
    bus: int
    demand: float
    omega_up: float = 0.5
    deviation: Optional[float] = None


@attr.s(**config)
class Player(Element):
    """
    Generation company bidding in the FTR auction.

    :var name: Player name.
    :var generators: Ids of the generators owned by the player.
    """
    name: str
    generators: List[int]


@attr.s(**config)
class PathSpec(Element):
    """
    Monitored FTR path.

    :var name: Path name. (defaults to "line<id>")
    :var line: Id of the monitored line whose flow defines the path's estimate.
    :var source: Source bus. (defaults to the upstream end of the line in the base dispatch)
    :var sink: Sink bus. (defaults to the downstream end of the line in the base dispatch)
    """
    line: int
    name: Optional[str] = None
    source: Optional[int] = None
    sink: Optional[int] = None


@attr.s(**config)
class SolverOptions(Element):
    """
    Tolerances and limits for the clearing, equilibrium and complementarity solvers.

    :var seed: Seed for the multiplier jitter of the complementarity solve.
    :var nash_tolerance: Largest unilateral improvement still accepted as an equilibrium.
    :var grid_resolution: Points per dimension of bid and quantity grids.
    :var max_rounds: Best response rounds before giving up.
    :var max_sweeps: Path sweeps within a single best response.
    :var kkt_tolerance: Residual tolerance of accepted equilibria.
    :var tau_start: First complementarity relaxation.
    :var tau_end: Last complementarity relaxation.
    :var tau_factor: Relaxation shrink factor per stage.
    :var kkt_max_iter: Iteration limit of each relaxation stage.
    :var lp_tolerance: Primal/dual feasibility tolerance of the LP solver.
    :var tie_break: Price bonus per rank used to break ties between equal offers.
    :var update: "sequential" or "simultaneous" best response updates.
    :var processes: Worker processes used to evaluate players.
    :var solve_kkt: Whether to run the joint complementarity solve.
    :var price_floor: Reserve price of obligation bids.
    """
    seed: int = 0
    nash_tolerance: float = 1e-3
    grid_resolution: int = attr.ib(default=10)
    max_rounds: int = 50
    max_sweeps: int = 3
    kkt_tolerance: float = 1e-6
    tau_start: float = 1e-1
    tau_end: float = 1e-8
    tau_factor: float = attr.ib(default=0.1)
    kkt_max_iter: int = 300
    lp_tolerance: float = 1e-9
    tie_break: float = 1e-6
    update: str = attr.ib(default="sequential", validator=attr.validators.in_(["sequential", "simultaneous"]))
    processes: int = 1
    solve_kkt: bool = True
    price_floor: float = 0.0

    @grid_resolution.validator
    def _check_grid(self, attribute, value):
        if value < 1:
            raise SchemaError(f"grid_resolution must be at least 1, got {value}")

    @tau_factor.validator
    def _check_tau_factor(self, attribute, value):
        if not 0 < value < 1:
            raise SchemaError(f"tau_factor must be within (0, 1), got {value}")


@attr.s(**config)
class ScenarioConfig(Element):
    """
    Complete scenario: network, players, monitored paths and solver options.

    :var name: Scenario name.
    :var buses: Network buses.
    :var lines: Network lines.
    :var generators: Network generators.
    :var loads: Network loads.
    :var players: Bidding players.
    :var paths: Monitored FTR paths.
    :var slack_bus: Reference bus. (defaults to the lowest-index generator bus)
    :var deviation_fraction: Default load deviation as a fraction of demand.
    :var solver: Solver options.
    :var output_dir: Directory tables are written to.
    :var base_mva: System base power. (informational)
    """
    name: str
    buses: List[Bus]
    lines: List[Line]
    generators: List[Generator]
    loads: List[Load]
    players: List[Player] = attr.ib(factory=list)
    paths: List[PathSpec] = attr.ib(factory=list)
    slack_bus: Optional[int] = None
    deviation_fraction: float = 0.10
    solver: SolverOptions = attr.ib(factory=SolverOptions)
    output_dir: Optional[str] = None
    base_mva: Optional[float] = None


@functools.lru_cache(maxsize=None)
def scenario_schema() -> dict:
    """
    JSON schema of scenario documents.
    """
    with resources.files("ftrbid.config").joinpath("scenario_schema.json").open("r") as fo:
        return json.load(fo)


def validate_document(document: dict):
    """
    Validates a raw scenario document against the scenario schema.

    :raises SchemaError: On the first validation error found.
    """
    try:
        jsonschema.validate(document, scenario_schema())
    except jsonschema.ValidationError as e:
        location = "/".join(str(part) for part in e.absolute_path) or "<root>"
        raise SchemaError(f"Invalid scenario document at {location}: {e.message}")
