#!/usr/bin/env python3
"""
Traffic Solver
Open multi-class queueing network of the city: every (street, direction,
segment) is an infinite-server node and every speed class is a customer
class. Solves the traffic equations alpha = lambda + alpha R and exposes the
product-form Poisson densities rho = alpha / mu.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.special import gammaln

from .core_model import (
    CLASS_COUNTS,
    SEGMENTS,
    STOCHASTIC_TOLERANCE,
    CityTopology,
    RunConfig,
    Segment,
    SpeedClass,
    turn_distribution,
)
from .exceptions import ConfigValidationError, TopologyError, TrafficSolverError

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
REFINEMENT_STEPS = 3

SEGMENT_OFFSETS = {Segment.FRONT: 0, Segment.MIDDLE: 2, Segment.END: 5}
PAIRS_PER_DIRECTION = 7
PAIRS_PER_STREET = 2 * PAIRS_PER_DIRECTION

# Direction 1 runs b -> a, so its end section lies next to intersection a
OPPOSITE_SECTION = {Segment.FRONT: Segment.END, Segment.MIDDLE: Segment.MIDDLE, Segment.END: Segment.FRONT}


@dataclass(frozen=True)
class NodeIndex:
    """
    Flat (node, class) indexing. Each street owns 14 pairs: per direction
    front (2 classes), middle (3) and end (2).
    """
    num_streets: int

    @property
    def size(self) -> int:
        return self.num_streets * PAIRS_PER_STREET

    def flat(self, street_id: int, direction: int, segment: Segment, cls: int) -> int:
        segment = Segment(segment)
        if not 0 <= cls < CLASS_COUNTS[segment]:
            raise TopologyError(f"Segment {segment.value} has no class {cls}")
        return street_id * PAIRS_PER_STREET + direction * PAIRS_PER_DIRECTION + SEGMENT_OFFSETS[segment] + cls

    def node_slice(self, street_id: int, direction: int, segment: Segment) -> slice:
        start = self.flat(street_id, direction, segment, 0)
        return slice(start, start + CLASS_COUNTS[Segment(segment)])

    def unflat(self, index: int) -> Tuple[int, int, Segment, int]:
        street_id, rest = divmod(index, PAIRS_PER_STREET)
        direction, offset = divmod(rest, PAIRS_PER_DIRECTION)
        for segment in reversed(SEGMENTS):
            if offset >= SEGMENT_OFFSETS[segment]:
                return street_id, direction, segment, offset - SEGMENT_OFFSETS[segment]
        raise TopologyError(f"Invalid flat index {index}")


@dataclass
class RoutingMatrix:
    """Sparse r[(j,u) -> (k,v)] plus the exit column r[(j,u) -> 0]"""
    matrix: sp.csr_matrix
    exit: np.ndarray
    index: NodeIndex

    @property
    def dimension(self) -> int:
        return self.index.size

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel() + self.exit

    def stochasticity_gap(self) -> float:
        return float(np.max(np.abs(self.row_sums() - 1.0))) if self.dimension else 0.0


@dataclass
class TrafficSolution:
    """Per (node, class) arrival rates, service rates and mean counts"""
    index: NodeIndex
    alpha: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    lam: np.ndarray
    residual: float
    routing: Optional[RoutingMatrix] = None

    def node_rho(self, street_id: int, direction: int, segment: Segment) -> np.ndarray:
        return self.rho[self.index.node_slice(street_id, direction, segment)]

    def node_alpha(self, street_id: int, direction: int, segment: Segment) -> np.ndarray:
        return self.alpha[self.index.node_slice(street_id, direction, segment)]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i in range(self.index.size):
            street_id, direction, segment, cls = self.index.unflat(i)
            rows.append({
                "street_id": street_id,
                "direction": direction,
                "segment": segment.value,
                "class": cls,
                "alpha": self.alpha[i],
                "mu": self.mu[i],
                "rho": self.rho[i],
            })
        return pd.DataFrame(rows, columns=["street_id", "direction", "segment", "class", "alpha", "mu", "rho"])

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
        logger.info(f"Wrote traffic solution to {path}")


def mean_service_rate(speed_class: SpeedClass, length: float) -> float:
    """
    Service rate of an infinite-server node traversed at a random speed

    Args:
        speed_class: Speed class of the customers
        length: Segment length in meters

    Returns:
        mu = 1 / (length * E[1/V]) in 1/s
    """
    if not length > 0:
        raise ConfigValidationError([f"segment length must be > 0, got {length}"])
    return 1.0 / (length * speed_class.mean_inverse_speed())


def build_routing_matrix(topology: CityTopology, config: RunConfig) -> RoutingMatrix:
    """
    Build the routing probabilities of the city network

    Within a street direction the front -> middle -> end chain is followed
    with probability one through the class transition matrices; an end node
    splits its mass over the front nodes of the next streets (turn policy and
    traffic weights) and the outside world.

    Args:
        topology: City topology
        config: Run configuration

    Returns:
        RoutingMatrix with every row stochastic
    """
    index = NodeIndex(len(topology.streets))
    front_to_middle = config.class_transitions.matrix("front_to_middle")
    middle_to_end = config.class_transitions.matrix("middle_to_end")
    end_to_front = config.class_transitions.matrix("end_to_front")

    rows: List[int] = []
    cols: List[int] = []
    values: List[float] = []
    exit_column = np.zeros(index.size)

    def add_block(source: slice, target: slice, block: np.ndarray, scale: float = 1.0) -> None:
        for u in range(block.shape[0]):
            for v in range(block.shape[1]):
                value = scale * block[u, v]
                if value != 0.0:
                    rows.append(source.start + u)
                    cols.append(target.start + v)
                    values.append(value)

    for street in topology.streets:
        for direction in (0, 1):
            if direction not in street.directions:
                exit_column[index.node_slice(street.id, direction, Segment.FRONT)] = 1.0
                exit_column[index.node_slice(street.id, direction, Segment.MIDDLE)] = 1.0
                exit_column[index.node_slice(street.id, direction, Segment.END)] = 1.0
                continue

            front = index.node_slice(street.id, direction, Segment.FRONT)
            middle = index.node_slice(street.id, direction, Segment.MIDDLE)
            end = index.node_slice(street.id, direction, Segment.END)
            add_block(front, middle, front_to_middle)
            add_block(middle, end, middle_to_end)

            for target, probability in turn_distribution(topology, street.id, direction, config):
                if target is None:
                    exit_column[end] += probability
                else:
                    next_front = index.node_slice(target[0], target[1], Segment.FRONT)
                    add_block(end, next_front, end_to_front, probability)

    matrix = sp.csr_matrix((values, (rows, cols)), shape=(index.size, index.size))
    routing = RoutingMatrix(matrix=matrix, exit=exit_column, index=index)

    gap = routing.stochasticity_gap()
    if gap > STOCHASTIC_TOLERANCE * 10:
        raise TrafficSolverError(f"Routing matrix rows are not stochastic (max deviation {gap:.3e})")

    logger.debug(f"Routing matrix: {index.size} (node, class) pairs, {matrix.nnz} transitions")
    return routing


def exogenous_rates(topology: CityTopology, index: NodeIndex, config: RunConfig) -> np.ndarray:
    """Exogenous arrival vector: each entrance rate split over the front classes"""
    lam = np.zeros(index.size)
    mix = np.asarray(config.traffic.entrance_class_mix, dtype=float)
    for entrance in topology.entrances:
        front = index.node_slice(entrance.street_id, entrance.direction, Segment.FRONT)
        lam[front] += entrance.rate * mix
    return lam


def service_rates(topology: CityTopology, index: NodeIndex, config: RunConfig) -> np.ndarray:
    """mu for every (node, class) pair"""
    mu = np.empty(index.size)
    geometry = config.geometry
    per_segment = {
        segment: [mean_service_rate(cls, geometry.length(segment))
                  for cls in config.speed_classes.for_segment(segment)]
        for segment in SEGMENTS
    }
    for street in topology.streets:
        for direction in (0, 1):
            for segment in SEGMENTS:
                mu[index.node_slice(street.id, direction, segment)] = per_segment[segment]
    return mu


def _residual(routing: RoutingMatrix, alpha: np.ndarray, lam: np.ndarray) -> float:
    if alpha.size == 0:
        return 0.0
    return float(np.max(np.abs(alpha - lam - routing.matrix.T @ alpha)))


def solve_traffic_equations(routing: RoutingMatrix, lam: np.ndarray,
                            mu: Optional[np.ndarray] = None) -> TrafficSolution:
    """
    Solve alpha = lambda + alpha R

    Args:
        routing: Routing matrix with an exit column
        lam: Exogenous arrival rates per (node, class)
        mu: Service rates per (node, class); when omitted rho is left at zero

    Returns:
        TrafficSolution whose residual is at most 1e-10 in max norm
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (routing.dimension,):
        raise TrafficSolverError(f"lambda has shape {lam.shape}, expected ({routing.dimension},)")
    if np.any(lam < 0):
        raise TrafficSolverError("Exogenous rates must be >= 0")

    system = (sp.identity(routing.dimension, format="csc") - routing.matrix.T.tocsc()).tocsc()

    if not np.any(lam):
        alpha = np.zeros(routing.dimension)
    else:
        alpha = np.asarray(spsolve(system, lam), dtype=float)
        if not np.all(np.isfinite(alpha)):
            raise TrafficSolverError("Traffic equations are singular", residual=float("inf"))
        for _ in range(REFINEMENT_STEPS):
            if _residual(routing, alpha, lam) <= RESIDUAL_TOLERANCE * 1e-2:
                break
            alpha = alpha + np.asarray(spsolve(system, lam - system @ alpha), dtype=float)

    residual = _residual(routing, alpha, lam)
    if residual > RESIDUAL_TOLERANCE:
        raise TrafficSolverError(
            f"Traffic equations did not reach the residual tolerance ({residual:.3e} > {RESIDUAL_TOLERANCE:.0e})",
            residual=residual,
        )
    if alpha.size and alpha.min() < -RESIDUAL_TOLERANCE:
        raise TrafficSolverError(f"Negative arrival rate {alpha.min():.3e} in solution", residual=residual)
    alpha = np.clip(alpha, 0.0, None)

    if mu is None:
        mu_values = np.ones(routing.dimension)
        rho = np.zeros(routing.dimension)
    else:
        mu_values = np.asarray(mu, dtype=float)
        rho = alpha / mu_values

    logger.debug(f"Traffic equations solved, residual {residual:.3e}")
    return TrafficSolution(index=routing.index, alpha=alpha, mu=mu_values, rho=rho, lam=lam,
                           residual=residual, routing=routing)


def solve_city(topology: CityTopology, config: RunConfig) -> TrafficSolution:
    """Routing, exogenous rates, service rates and solution for one city"""
    routing = build_routing_matrix(topology, config)
    lam = exogenous_rates(topology, routing.index, config)
    mu = service_rates(topology, routing.index, config)
    solution = solve_traffic_equations(routing, lam, mu)
    logger.info(
        f"Solved traffic for {len(topology.streets)} streets: total inflow {lam.sum():.4g} veh/s, "
        f"mean street rho {solution.rho.sum() / max(len(topology.streets), 1):.4g}"
    )
    return solution


def segment_densities(solution: TrafficSolution, street_id: int, segment) -> float:
    """
    Mean vehicle count on one physical section of a street

    Sections are named along direction 0: "front" is the stretch next to
    intersection a, "end" the stretch next to b. Each stretch holds one
    section of each travel direction (front of direction 0 with end of
    direction 1 at a, and the reverse at b).

    Args:
        solution: Solved traffic
        street_id: Street id
        segment: "front", "middle" or "end"

    Returns:
        Class-summed rho of the two direction nodes sharing that stretch
    """
    if not 0 <= street_id < solution.index.num_streets:
        raise TopologyError(f"Unknown street id {street_id}")
    try:
        segment = Segment(segment)
    except ValueError:
        raise TopologyError(f"Unknown segment '{segment}'")
    return float(math.fsum(solution.node_rho(street_id, 0, segment)) +
                 math.fsum(solution.node_rho(street_id, 1, OPPOSITE_SECTION[segment])))


def product_form_pmf(rhos: Sequence[float], counts: Sequence[int]) -> float:
    """Product of independent Poisson pmfs: prod exp(-rho_u) rho_u^n_u / n_u!"""
    if len(rhos) != len(counts):
        raise TrafficSolverError(f"Expected {len(rhos)} class counts, got {len(counts)}")
    log_value = 0.0
    for rho, count in zip(rhos, counts):
        if count < 0:
            return 0.0
        if rho == 0:
            if count > 0:
                return 0.0
            continue
        log_value += count * math.log(rho) - rho - gammaln(count + 1)
    return float(math.exp(log_value))


def spatial_distribution_pmf(solution: TrafficSolution, node: Tuple[int, int, str],
                             counts: Sequence[int]) -> float:
    """
    Stationary probability of the per-class counts at one queue node

    Args:
        solution: Solved traffic
        node: (street_id, direction, segment)
        counts: Vehicle count per class of that segment

    Returns:
        Product-form Poisson probability
    """
    street_id, direction, segment = node
    return product_form_pmf(solution.node_rho(street_id, direction, segment), counts)


def exit_flow(solution: TrafficSolution, routing: Optional[RoutingMatrix] = None) -> float:
    """Total rate of vehicles leaving the city"""
    routing = routing or solution.routing
    if routing is None:
        raise TrafficSolverError("Exit flow needs the routing matrix")
    return float(math.fsum(solution.alpha * routing.exit))


def flow_conservation_gap(solution: TrafficSolution, routing: Optional[RoutingMatrix] = None) -> float:
    """|total inflow - total outflow|"""
    return abs(math.fsum(solution.lam) - exit_flow(solution, routing))


def street_rho_triplets(topology: CityTopology, solution: TrafficSolution) -> Dict[int, Tuple[float, float, float]]:
    """(rho1, rho2, rho3) per street, both directions summed"""
    return {
        street.id: tuple(segment_densities(solution, street.id, segment) for segment in SEGMENTS)
        for street in topology.streets
    }
