#!/usr/bin/env python3
"""
Core Model
City topology, street geometry, speed classes and the run configuration
shared by the traffic solver, the connectivity formulas, the percolation
engine and the simulator.

Defaults reproduce the typical parameter table of the mobility model:
three middle-part speed classes, two front and two end classes, a
200/1600/200 m street and a 200 m transmission range.
"""

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from dataclasses_json import dataclass_json

from .exceptions import ConfigValidationError, TopologyError

logger = logging.getLogger(__name__)

STOCHASTIC_TOLERANCE = 1e-12

SIDES = ("north", "east", "south", "west")
SIDE_OFFSETS = {"north": (-1, 0), "east": (0, 1), "south": (1, 0), "west": (0, -1)}
OPPOSITE = {"north": "south", "south": "north", "east": "west", "west": "east"}
LEFT_OF = {"north": "west", "west": "south", "south": "east", "east": "north"}
RIGHT_OF = {"north": "east", "east": "south", "south": "west", "west": "north"}


class Segment(str, Enum):
    """Travel phase of a vehicle along one direction of a street"""
    FRONT = "front"
    MIDDLE = "middle"
    END = "end"


SEGMENTS = (Segment.FRONT, Segment.MIDDLE, Segment.END)
CLASS_COUNTS = {Segment.FRONT: 2, Segment.MIDDLE: 3, Segment.END: 2}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass_json
@dataclass(frozen=True)
class SpeedClass:
    """A speed category; vehicles of the class draw a speed from [v_min, v_max]"""
    name: str
    v_min: float
    v_max: float
    distribution: str = "uniform"

    def mean_inverse_speed(self) -> float:
        """E[1/V] in s/m; for uniform V on [a, b] this is ln(b/a)/(b - a)"""
        if self.v_min <= 0:
            raise ConfigValidationError([
                f"speed class '{self.name}': v_min must be > 0 for a finite E[1/V], got {self.v_min}"
            ])
        if self.v_max == self.v_min:
            return 1.0 / self.v_min
        return math.log(self.v_max / self.v_min) / (self.v_max - self.v_min)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        """Draw speed(s) uniformly within the class bounds"""
        return rng.uniform(self.v_min, self.v_max, size=size)


def _front_classes() -> List[SpeedClass]:
    return [SpeedClass("low", 0.3, 3.0), SpeedClass("medium", 3.0, 14.0)]


def _middle_classes() -> List[SpeedClass]:
    return [SpeedClass("low", 3.0, 14.0), SpeedClass("medium", 14.0, 22.0), SpeedClass("fast", 22.0, 33.0)]


def _end_classes() -> List[SpeedClass]:
    return [SpeedClass("low", 0.3, 1.5), SpeedClass("medium", 1.5, 14.0)]


@dataclass_json
@dataclass(frozen=True)
class SpeedClasses:
    """Speed classes per segment role"""
    front: List[SpeedClass] = field(default_factory=_front_classes)
    middle: List[SpeedClass] = field(default_factory=_middle_classes)
    end: List[SpeedClass] = field(default_factory=_end_classes)

    def for_segment(self, segment: Segment) -> List[SpeedClass]:
        return getattr(self, Segment(segment).value)


@dataclass_json
@dataclass(frozen=True)
class StreetGeometry:
    """Lengths (m) of the three parts of a street; D is the middle part"""
    len_front: float = 200.0
    len_middle: float = 1600.0
    len_end: float = 200.0

    @property
    def D(self) -> float:
        return self.len_middle

    @property
    def total_length(self) -> float:
        return self.len_front + self.len_middle + self.len_end

    def length(self, segment: Segment) -> float:
        return {
            Segment.FRONT: self.len_front,
            Segment.MIDDLE: self.len_middle,
            Segment.END: self.len_end,
        }[Segment(segment)]

    def start(self, segment: Segment) -> float:
        """Distance from the street origin to the start of a segment"""
        return {
            Segment.FRONT: 0.0,
            Segment.MIDDLE: self.len_front,
            Segment.END: self.len_front + self.len_middle,
        }[Segment(segment)]


def _front_to_middle() -> List[List[float]]:
    return [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]


def _middle_to_end() -> List[List[float]]:
    return [[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]


def _end_to_front() -> List[List[float]]:
    return [[1.0, 0.0], [0.0, 1.0]]


@dataclass_json
@dataclass(frozen=True)
class ClassTransitions:
    """Row-stochastic class transition matrices between consecutive segments"""
    front_to_middle: List[List[float]] = field(default_factory=_front_to_middle)
    middle_to_end: List[List[float]] = field(default_factory=_middle_to_end)
    end_to_front: List[List[float]] = field(default_factory=_end_to_front)

    def matrix(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)


@dataclass_json
@dataclass(frozen=True)
class TurnSplit:
    """Base probabilities of the three moves at an intersection"""
    straight: float = 0.5
    left: float = 0.25
    right: float = 0.25

    def as_dict(self) -> Dict[str, float]:
        return {"straight": self.straight, "left": self.left, "right": self.right}


@dataclass_json
@dataclass(frozen=True)
class TurnPolicy:
    """
    Turning behaviour at intersections.

    exit_probability, when set, fixes the mass routed outside the city at
    boundary intersections with missing sides. When unset, missing moves keep
    their base mass (scaled by exit_weight) and go outside.
    """
    straight: float = 0.5
    left: float = 0.25
    right: float = 0.25
    exit_probability: Optional[float] = None
    exit_weight: float = 1.0
    overrides: Dict[str, TurnSplit] = field(default_factory=dict)

    def split_at(self, intersection_id: int) -> TurnSplit:
        override = self.overrides.get(str(intersection_id))
        if override is not None:
            return override
        return TurnSplit(self.straight, self.left, self.right)


@dataclass_json
@dataclass(frozen=True)
class CityConfig:
    grid_side: int = 7
    traffic_weights: Optional[List[float]] = None


def _all_sides() -> List[str]:
    return list(SIDES)


def _default_class_mix() -> List[float]:
    return [0.5, 0.5]


@dataclass_json
@dataclass(frozen=True)
class TrafficConfig:
    """Exogenous arrivals: rate per entrance (vehicles/s)"""
    entrance_rate: float = 0.1
    entrance_sides: List[str] = field(default_factory=_all_sides)
    entrance_class_mix: List[float] = field(default_factory=_default_class_mix)


@dataclass_json
@dataclass(frozen=True)
class TransmissionConfig:
    """
    Radio model. model = "single" uses range_m for every vehicle; "dual"
    gives range x1 with probability p_type1 and x2 otherwise.
    """
    model: str = "single"
    range_m: float = 200.0
    x1: float = 200.0
    x2: float = 400.0
    p_type1: float = 0.5
    bound_formula: str = "exact"
    weight_orientation: str = "type1_probability"
    link_rule: str = "max"

    @property
    def is_dual(self) -> bool:
        return self.model == "dual"

    @property
    def min_range(self) -> float:
        return self.x1 if self.is_dual else self.range_m


@dataclass_json
@dataclass(frozen=True)
class PercolationConfig:
    iterations: int = 1000
    avg_cluster_definition: str = "mean"
    n_jobs: int = 1


@dataclass_json
@dataclass(frozen=True)
class SimulationConfig:
    """Time-stepped simulator settings (seconds)"""
    dt: float = 0.1
    warmup: Optional[float] = None
    run_length: float = 10800.0
    sample_interval: float = 30.0
    batches: int = 20


@dataclass_json
@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    log_file: Optional[str] = None


@dataclass_json
@dataclass(frozen=True)
class RunConfig:
    """Complete run configuration; defaults are the typical parameter table"""
    city: CityConfig = field(default_factory=CityConfig)
    geometry: StreetGeometry = field(default_factory=StreetGeometry)
    speed_classes: SpeedClasses = field(default_factory=SpeedClasses)
    class_transitions: ClassTransitions = field(default_factory=ClassTransitions)
    turns: TurnPolicy = field(default_factory=TurnPolicy)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    transmission: TransmissionConfig = field(default_factory=TransmissionConfig)
    percolation: PercolationConfig = field(default_factory=PercolationConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    seed: int = 12345

    def config_hash(self) -> str:
        """sha256 over the canonical JSON form of the configuration"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(config_path: str) -> RunConfig:
    """Load a RunConfig from a YAML file; missing keys take their defaults"""
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    with open(config_path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}

    logger.debug(f"Loaded configuration from {config_path}")
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig, config_path: str) -> None:
    """Write a RunConfig as YAML"""
    with open(config_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Return a copy of config with dotted-path fields replaced

    Args:
        config: Base configuration
        overrides: Mapping such as {"traffic.entrance_rate": 0.2, "seed": 7}

    Returns:
        New RunConfig
    """
    data = copy.deepcopy(config.to_dict())
    for dotted_key, value in overrides.items():
        parts = dotted_key.split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigValidationError([f"{dotted_key}: unknown configuration key"])
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigValidationError([f"{dotted_key}: unknown configuration key"])
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def draw_traffic_weights(config: RunConfig, low: float = 1.0, high: float = 2.0,
                         seed: Optional[int] = None) -> RunConfig:
    """Return a config whose intersection weights are drawn uniformly in [low, high]"""
    side = config.city.grid_side
    rng = np.random.default_rng(config.seed if seed is None else seed)
    weights = rng.uniform(low, high, size=side * side)
    city = replace(config.city, traffic_weights=[float(w) for w in weights])
    return replace(config, city=city)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _check_stochastic_matrix(name: str, matrix: List[List[float]], shape: Tuple[int, int]) -> List[str]:
    violations = []
    rows = len(matrix)
    if rows != shape[0] or any(len(row) != shape[1] for row in matrix):
        violations.append(f"class_transitions.{name}: expected shape {shape[0]}x{shape[1]}")
        return violations
    for i, row in enumerate(matrix):
        if any(value < 0 or value > 1 for value in row):
            violations.append(f"class_transitions.{name}[{i}]: entries must lie in [0, 1]")
        total = math.fsum(row)
        if abs(total - 1.0) > STOCHASTIC_TOLERANCE:
            violations.append(
                f"class_transitions.{name}[{i}]: row sums to {total:.15g}, must sum to 1"
            )
    return violations


def _check_turn_split(label: str, split: TurnSplit) -> List[str]:
    violations = []
    values = split.as_dict()
    if any(value < 0 for value in values.values()):
        violations.append(f"{label}: turn probabilities must be >= 0")
    total = math.fsum(values.values())
    if abs(total - 1.0) > STOCHASTIC_TOLERANCE:
        violations.append(f"{label}: straight+left+right sums to {total:.15g}, must sum to 1")
    return violations


def validate_config(config: RunConfig) -> List[str]:
    """
    Check every invariant of a run configuration

    Args:
        config: Configuration to check

    Returns:
        List of violations, empty when the configuration is valid. Each entry
        names the field and the rule it breaks.
    """
    violations: List[str] = []

    side = config.city.grid_side
    if not isinstance(side, int) or side < 2:
        violations.append(f"city.grid_side: must be an integer >= 2, got {side}")
    weights = config.city.traffic_weights
    if weights is not None:
        if isinstance(side, int) and side >= 2 and len(weights) != side * side:
            violations.append(
                f"city.traffic_weights: expected {side * side} weights (one per intersection), got {len(weights)}"
            )
        for i, weight in enumerate(weights):
            if not weight > 0:
                violations.append(f"city.traffic_weights[{i}]: traffic weight must be > 0, got {weight}")

    geometry = config.geometry
    for name in ("len_front", "len_middle", "len_end"):
        value = getattr(geometry, name)
        if not value > 0:
            violations.append(f"geometry.{name}: length must be > 0, got {value}")

    for segment in SEGMENTS:
        classes = config.speed_classes.for_segment(segment)
        expected = CLASS_COUNTS[segment]
        if len(classes) != expected:
            violations.append(
                f"speed_classes.{segment.value}: expected exactly {expected} classes, got {len(classes)}"
            )
        for speed_class in classes:
            label = f"speed_classes.{segment.value}.{speed_class.name}"
            if not 0 < speed_class.v_min < speed_class.v_max:
                violations.append(f"{label}: 0 < v_min < v_max required")
            if speed_class.distribution != "uniform":
                violations.append(f"{label}: unsupported distribution '{speed_class.distribution}'")

    transitions = config.class_transitions
    violations += _check_stochastic_matrix("front_to_middle", transitions.front_to_middle, (2, 3))
    violations += _check_stochastic_matrix("middle_to_end", transitions.middle_to_end, (3, 2))
    violations += _check_stochastic_matrix("end_to_front", transitions.end_to_front, (2, 2))

    turns = config.turns
    violations += _check_turn_split("turns (default at every intersection)",
                                    TurnSplit(turns.straight, turns.left, turns.right))
    for key, split in sorted(turns.overrides.items()):
        violations += _check_turn_split(f"turns.overrides[intersection {key}]", split)
        if isinstance(side, int) and side >= 2:
            if not key.isdigit() or int(key) >= side * side:
                violations.append(f"turns.overrides[intersection {key}]: no such intersection")
    if turns.exit_probability is not None and not 0 < turns.exit_probability <= 1:
        violations.append(f"turns.exit_probability: must lie in (0, 1], got {turns.exit_probability}")
    if not turns.exit_weight > 0:
        violations.append(f"turns.exit_weight: must be > 0, got {turns.exit_weight}")

    traffic = config.traffic
    if not traffic.entrance_rate >= 0:
        violations.append(f"traffic.entrance_rate: must be >= 0, got {traffic.entrance_rate}")
    unknown = [s for s in traffic.entrance_sides if s not in SIDES]
    if unknown:
        violations.append(f"traffic.entrance_sides: unknown side(s) {unknown}")
    mix = traffic.entrance_class_mix
    if len(mix) != CLASS_COUNTS[Segment.FRONT] or any(m < 0 for m in mix) \
            or abs(math.fsum(mix) - 1.0) > STOCHASTIC_TOLERANCE:
        violations.append("traffic.entrance_class_mix: must be 2 nonnegative values summing to 1")

    tx = config.transmission
    if tx.model not in ("single", "dual"):
        violations.append(f"transmission.model: must be 'single' or 'dual', got '{tx.model}'")
    if not tx.range_m > 0:
        violations.append(f"transmission.range_m: must be > 0, got {tx.range_m}")
    if tx.model == "dual":
        if not 0 < tx.x1:
            violations.append(f"transmission.x1: must be > 0, got {tx.x1}")
        if not tx.x1 < tx.x2:
            violations.append("transmission: x1 < x2 required")
        if not 0 <= tx.p_type1 <= 1:
            violations.append(f"transmission.p_type1: must lie in [0, 1], got {tx.p_type1}")
    if tx.bound_formula not in ("exact", "approximate"):
        violations.append(f"transmission.bound_formula: must be 'exact' or 'approximate', got '{tx.bound_formula}'")
    if tx.weight_orientation not in ("type1_probability", "printed"):
        violations.append(
            f"transmission.weight_orientation: must be 'type1_probability' or 'printed', got '{tx.weight_orientation}'"
        )
    if tx.link_rule not in ("max", "min"):
        violations.append(f"transmission.link_rule: must be 'max' or 'min', got '{tx.link_rule}'")

    perc = config.percolation
    if not perc.iterations >= 1:
        violations.append(f"percolation.iterations: must be >= 1, got {perc.iterations}")
    if perc.avg_cluster_definition not in ("mean", "susceptibility"):
        violations.append(
            f"percolation.avg_cluster_definition: must be 'mean' or 'susceptibility', got '{perc.avg_cluster_definition}'"
        )

    sim = config.simulation
    if not sim.dt > 0:
        violations.append(f"simulation.dt: must be > 0, got {sim.dt}")
    if not sim.sample_interval > 0:
        violations.append(f"simulation.sample_interval: must be > 0, got {sim.sample_interval}")
    if not sim.run_length > 0:
        violations.append(f"simulation.run_length: must be > 0, got {sim.run_length}")
    if sim.warmup is not None and not sim.warmup >= 0:
        violations.append(f"simulation.warmup: must be >= 0, got {sim.warmup}")
    if not sim.batches >= 2:
        violations.append(f"simulation.batches: must be >= 2, got {sim.batches}")

    return violations


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intersection:
    id: int
    row: int
    col: int
    traffic_weight: float = 1.0


@dataclass(frozen=True)
class Street:
    """
    A street between intersections a < b. Direction 0 runs a -> b (east or
    south), direction 1 runs b -> a. Each direction owns three queue nodes.
    """
    id: int
    endpoints: Tuple[int, int]
    orientation: str
    node_ids: Tuple[Tuple[int, int, int], Tuple[int, int, int]]
    geometry: StreetGeometry
    directions: Tuple[int, ...] = (0, 1)

    def origin(self, direction: int) -> int:
        return self.endpoints[direction]

    def destination(self, direction: int) -> int:
        return self.endpoints[1 - direction]

    def heading(self, direction: int) -> str:
        if self.orientation == "horizontal":
            return "east" if direction == 0 else "west"
        return "south" if direction == 0 else "north"


@dataclass(frozen=True)
class Entrance:
    """Exogenous Poisson arrivals into the front of (street, direction)"""
    street_id: int
    direction: int
    rate: float
    side: str


@dataclass(frozen=True)
class CityTopology:
    rows: int
    cols: int
    intersections: Tuple[Intersection, ...]
    streets: Tuple[Street, ...]
    entrances: Tuple[Entrance, ...]
    _street_lookup: Dict[Tuple[int, int], int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        lookup = {}
        for street in self.streets:
            a, b = street.endpoints
            lookup[(a, b)] = street.id
            lookup[(b, a)] = street.id
        object.__setattr__(self, "_street_lookup", lookup)

    @property
    def grid_side(self) -> int:
        if self.rows != self.cols:
            raise TopologyError(f"Topology is {self.rows}x{self.cols}, not a square grid")
        return self.rows

    @property
    def num_queue_nodes(self) -> int:
        return 3 * sum(len(street.directions) for street in self.streets)

    def street(self, street_id: int) -> Street:
        if not 0 <= street_id < len(self.streets):
            raise TopologyError(f"Unknown street id {street_id}")
        return self.streets[street_id]

    def neighbor(self, intersection_id: int, side: str) -> Optional[int]:
        node = self.intersections[intersection_id]
        d_row, d_col = SIDE_OFFSETS[side]
        row, col = node.row + d_row, node.col + d_col
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row * self.cols + col
        return None

    def leaving(self, intersection_id: int, side: str) -> Optional[Tuple[int, int]]:
        """(street, direction) leaving the intersection towards side, if travel is allowed"""
        other = self.neighbor(intersection_id, side)
        if other is None:
            return None
        street_id = self._street_lookup.get((intersection_id, other))
        if street_id is None:
            return None
        street = self.streets[street_id]
        direction = 0 if street.endpoints[0] == intersection_id else 1
        if direction not in street.directions:
            return None
        return street_id, direction

    def is_boundary(self, intersection_id: int) -> bool:
        return any(self.neighbor(intersection_id, side) is None for side in SIDES)


def lattice_edges(rows: int, cols: int) -> List[Tuple[int, int, str]]:
    """
    Street (bond) list of a rows x cols lattice in canonical order: for each
    intersection in row-major order, the eastward street then the southward one.
    """
    edges = []
    for row in range(rows):
        for col in range(cols):
            node = row * cols + col
            if col + 1 < cols:
                edges.append((node, node + 1, "horizontal"))
            if row + 1 < rows:
                edges.append((node, node + cols, "vertical"))
    return edges


def _build_topology(rows: int, cols: int, config: RunConfig, weights: List[float],
                    directions: Tuple[int, ...]) -> CityTopology:
    intersections = tuple(
        Intersection(id=row * cols + col, row=row, col=col, traffic_weight=float(weights[row * cols + col]))
        for row in range(rows) for col in range(cols)
    )
    streets = []
    for street_id, (a, b, orientation) in enumerate(lattice_edges(rows, cols)):
        base = 6 * street_id
        streets.append(Street(
            id=street_id,
            endpoints=(a, b),
            orientation=orientation,
            node_ids=((base, base + 1, base + 2), (base + 3, base + 4, base + 5)),
            geometry=config.geometry,
            directions=directions,
        ))

    partial = CityTopology(rows, cols, intersections, tuple(streets), ())
    entrances = []
    allowed = set(config.traffic.entrance_sides)
    for node in intersections:
        for side in SIDES:
            if side not in allowed or partial.neighbor(node.id, side) is not None:
                continue
            target = partial.leaving(node.id, OPPOSITE[side])
            if target is None:
                continue
            entrances.append(Entrance(target[0], target[1], config.traffic.entrance_rate, side))

    return CityTopology(rows, cols, intersections, tuple(streets), tuple(entrances))


def build_city(config: RunConfig) -> CityTopology:
    """
    Build the N_g x N_g lattice city described by a configuration

    Args:
        config: Validated run configuration

    Returns:
        CityTopology with 2*N_g*(N_g-1) two-way streets (6 queue nodes each)
        and one entrance per boundary gate
    """
    violations = validate_config(config)
    if violations:
        raise ConfigValidationError(violations)

    side = config.city.grid_side
    weights = config.city.traffic_weights or [1.0] * (side * side)
    topology = _build_topology(side, side, config, weights, (0, 1))
    logger.debug(
        f"Built {side}x{side} city: {len(topology.streets)} streets, "
        f"{topology.num_queue_nodes} queue nodes, {len(topology.entrances)} entrances"
    )
    return topology


def build_corridor(config: RunConfig, n_streets: int = 1, one_way: bool = True) -> CityTopology:
    """
    Build an isolated straight chain of streets (a single row of intersections)

    Args:
        config: Run configuration supplying geometry, turns and entrance rate
        n_streets: Number of consecutive streets
        one_way: Only allow travel west -> east

    Returns:
        CityTopology with rows = 1
    """
    if n_streets < 1:
        raise TopologyError(f"A corridor needs at least one street, got {n_streets}")
    cols = n_streets + 1
    directions = (0,) if one_way else (0, 1)
    return _build_topology(1, cols, config, [1.0] * cols, directions)


def turn_distribution(topology: CityTopology, street_id: int, direction: int,
                      config: RunConfig) -> List[Tuple[Optional[Tuple[int, int]], float]]:
    """
    Routing of a vehicle that leaves the end segment of (street, direction)

    Args:
        topology: City topology
        street_id: Street being left
        direction: Travel direction on that street
        config: Run configuration (turn policy)

    Returns:
        List of (target, probability); target is the (street, direction)
        entered next, or None for leaving the city. Probabilities sum to 1.
    """
    street = topology.street(street_id)
    if direction not in street.directions:
        raise TopologyError(f"Street {street_id} has no direction {direction}")

    node = street.destination(direction)
    heading = street.heading(direction)
    split = config.turns.split_at(node)
    moves = (
        (heading, split.straight),
        (LEFT_OF[heading], split.left),
        (RIGHT_OF[heading], split.right),
    )

    present = []
    missing_mass = 0.0
    for side, base in moves:
        target = topology.leaving(node, side)
        if target is None:
            missing_mass += base
            continue
        destination = topology.streets[target[0]].destination(target[1])
        present.append((target, base * topology.intersections[destination].traffic_weight))

    exit_probability = config.turns.exit_probability
    present_mass = math.fsum(weight for _, weight in present)

    if not present or present_mass <= 0:
        return [(None, 1.0)]

    if missing_mass > 0 and exit_probability is not None:
        exit_mass = exit_probability
        moves_out = [(target, (1.0 - exit_mass) * weight / present_mass) for target, weight in present]
    else:
        exit_weight = missing_mass * config.turns.exit_weight
        total = present_mass + exit_weight
        exit_mass = exit_weight / total
        moves_out = [(target, weight / total) for target, weight in present]

    if exit_mass > 0:
        moves_out.append((None, exit_mass))
    return moves_out
