#!/usr/bin/env python3
"""
VANET Simulator
Time-stepped microscopic simulation of independent vehicles on the city
grid. Vehicles enter at the gates, cross the front, middle and end parts of
each street at speeds redrawn per part, turn at intersections with the same
probabilities as the queueing model and leave at the boundary.

Snapshots mark a street open when the vehicles on it (both directions)
bridge the full street, and cluster the intersections over open streets.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .core_model import (
    SEGMENTS,
    CityTopology,
    RunConfig,
    Segment,
    build_city,
    turn_distribution,
    validate_config,
)
from .exceptions import ConfigValidationError, SimulationError
from .percolation_engine import UnionFind, state_observables
from .traffic_solver import mean_service_rate

logger = logging.getLogger(__name__)

MAX_ARRIVAL_PROBABILITY = 0.1
WARMUP_FACTOR = 3.0
SNAPSHOT_OBSERVABLES = ("giant_fraction", "avg_cluster_size", "perfect_connectivity",
                        "susceptibility", "street_open_frequency")


@dataclass(frozen=True)
class Vehicle:
    id: int
    street_id: int
    direction: int
    segment: Segment
    offset: float
    speed: float
    cls: int
    range_m: float


class SimulationState:
    """Vehicles stored column-wise plus the conservation counters"""

    _COLUMNS = (("ids", np.int64), ("street", np.int64), ("direction", np.int64), ("segment", np.int64),
                ("offset", float), ("speed", float), ("cls", np.int64), ("range_m", float),
                ("travelled", float))

    def __init__(self):
        for name, dtype in self._COLUMNS:
            setattr(self, name, np.zeros(0, dtype=dtype))
        self.time = 0.0
        self.steps = 0
        self.injected = 0
        self.exited = 0
        self.next_id = 0

    def __len__(self) -> int:
        return int(self.ids.size)

    def append(self, street, direction, segment, offset, speed, cls, range_m) -> None:
        count = len(np.atleast_1d(street))
        if count == 0:
            return
        new = {
            "ids": np.arange(self.next_id, self.next_id + count),
            "street": street, "direction": direction, "segment": segment, "offset": offset,
            "speed": speed, "cls": cls, "range_m": range_m, "travelled": np.zeros(count),
        }
        for name, dtype in self._COLUMNS:
            column = np.broadcast_to(np.asarray(new[name], dtype=dtype), (count,))
            setattr(self, name, np.concatenate([getattr(self, name), column]))
        self.next_id += count
        self.injected += count

    def add_vehicle(self, street_id: int, direction: int, segment: Segment = Segment.FRONT,
                    offset: float = 0.0, speed: float = 10.0, cls: int = 0, range_m: float = 200.0) -> int:
        """Place one vehicle; returns its id"""
        vehicle_id = self.next_id
        self.append([street_id], [direction], [SEGMENTS.index(Segment(segment))], [offset], [speed], [cls], [range_m])
        return vehicle_id

    def remove(self, mask: np.ndarray) -> None:
        keep = ~mask
        for name, _ in self._COLUMNS:
            setattr(self, name, getattr(self, name)[keep])
        self.exited += int(mask.sum())

    def vehicles(self) -> List[Vehicle]:
        return [
            Vehicle(int(self.ids[i]), int(self.street[i]), int(self.direction[i]), SEGMENTS[int(self.segment[i])],
                    float(self.offset[i]), float(self.speed[i]), int(self.cls[i]), float(self.range_m[i]))
            for i in range(len(self))
        ]

    def node_ids(self) -> np.ndarray:
        """Queue node of every vehicle (street * 6 + direction * 3 + segment)"""
        return self.street * 6 + self.direction * 3 + self.segment


@dataclass
class SimulationSnapshot:
    time: float
    street_open: np.ndarray
    observables: Dict[str, float]
    segment_counts: np.ndarray

    @property
    def giant_fraction(self) -> float:
        return self.observables["giant_fraction"]


def snapshot_graph(state: SimulationState, topology: CityTopology, link_rule: str = "max") -> SimulationSnapshot:
    """
    Street-open flags and intersection clusters at the current instant

    Args:
        state: Simulation state
        topology: City topology
        link_rule: "max" or "min" of the two adjacent vehicle ranges

    Returns:
        SimulationSnapshot
    """
    if link_rule not in ("max", "min"):
        raise SimulationError(f"Unknown link rule '{link_rule}'")
    num_streets = len(topology.streets)
    geometry = topology.streets[0].geometry
    total = geometry.total_length
    starts = np.array([geometry.start(segment) for segment in SEGMENTS])

    along = starts[state.segment] + state.offset
    position = np.where(state.direction == 0, along, total - along)
    order = np.lexsort((position, state.street))
    streets = state.street[order]
    positions = position[order]
    ranges = state.range_m[order]
    bounds = np.searchsorted(streets, np.arange(num_streets + 1))
    combine = np.maximum if link_rule == "max" else np.minimum

    street_open = np.zeros(num_streets, dtype=bool)
    for street_id in range(num_streets):
        lo, hi = bounds[street_id], bounds[street_id + 1]
        if lo == hi:
            continue
        p, r = positions[lo:hi], ranges[lo:hi]
        if p[0] > r[0] or total - p[-1] > r[-1]:
            continue
        if hi - lo > 1 and np.any(np.diff(p) > combine(r[:-1], r[1:])):
            continue
        street_open[street_id] = True

    clusters = UnionFind(len(topology.intersections))
    for street_id in np.flatnonzero(street_open):
        a, b = topology.streets[street_id].endpoints
        clusters.union(a, b)
    observables = state_observables(clusters)
    observables["street_open_frequency"] = float(street_open.mean()) if num_streets else 0.0

    counts = np.bincount(state.node_ids(), minlength=6 * num_streets)
    return SimulationSnapshot(time=state.time, street_open=street_open, observables=observables,
                              segment_counts=counts)


class VanetSimulator:
    """Routing tables, speed classes and arrival probabilities of one city"""

    def __init__(self, topology: CityTopology, config: RunConfig):
        self.topology = topology
        self.config = config
        geometry = config.geometry
        self.segment_lengths = np.array([geometry.length(segment) for segment in SEGMENTS])
        self.class_bounds = [
            np.array([[c.v_min, c.v_max] for c in config.speed_classes.for_segment(segment)])
            for segment in SEGMENTS
        ]
        self.transition_cdfs = [
            np.cumsum(config.class_transitions.matrix(name), axis=1)
            for name in ("front_to_middle", "middle_to_end", "end_to_front")
        ]
        self.entry_cdf = np.cumsum(config.traffic.entrance_class_mix)

        self.routes: Dict[Tuple[int, int], Tuple[List[Optional[Tuple[int, int]]], np.ndarray]] = {}
        for street in topology.streets:
            for direction in street.directions:
                moves = turn_distribution(topology, street.id, direction, config)
                self.routes[(street.id, direction)] = ([t for t, _ in moves], np.cumsum([p for _, p in moves]))

        self.entrance_street = np.array([e.street_id for e in topology.entrances], dtype=np.int64)
        self.entrance_direction = np.array([e.direction for e in topology.entrances], dtype=np.int64)
        self.entrance_rate = np.array([e.rate for e in topology.entrances], dtype=float)

    def _draw_classes(self, cdf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(cdf.shape[0])
        return np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)

    def _draw_speeds(self, segment: int, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        bounds = self.class_bounds[segment][classes]
        return bounds[:, 0] + rng.random(classes.size) * (bounds[:, 1] - bounds[:, 0])

    def _draw_ranges(self, count: int, rng: np.random.Generator) -> np.ndarray:
        tx = self.config.transmission
        if tx.is_dual:
            return np.where(rng.random(count) < tx.p_type1, tx.x1, tx.x2)
        return np.full(count, tx.range_m)

    def _cross_boundaries(self, state: SimulationState, rng: np.random.Generator) -> None:
        while True:
            over = state.offset >= self.segment_lengths[state.segment]
            if not over.any():
                return
            leftover = state.offset - self.segment_lengths[state.segment]
            previous = state.segment.copy()

            for segment in (0, 1):
                idx = np.flatnonzero(over & (previous == segment))
                if idx.size == 0:
                    continue
                classes = self._draw_classes(self.transition_cdfs[segment][state.cls[idx]], rng)
                state.segment[idx] = segment + 1
                state.cls[idx] = classes
                state.speed[idx] = self._draw_speeds(segment + 1, classes, rng)
                state.offset[idx] = leftover[idx]

            idx = np.flatnonzero(over & (previous == 2))
            if idx.size == 0:
                continue
            leaving = np.zeros(len(state), dtype=bool)
            continuing = []
            for i in idx:
                targets, cdf = self.routes[(int(state.street[i]), int(state.direction[i]))]
                choice = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(targets) - 1)
                target = targets[choice]
                if target is None:
                    leaving[i] = True
                else:
                    state.street[i], state.direction[i] = target
                    continuing.append(i)
            if continuing:
                moved = np.asarray(continuing)
                classes = self._draw_classes(self.transition_cdfs[2][state.cls[moved]], rng)
                state.segment[moved] = 0
                state.cls[moved] = classes
                state.speed[moved] = self._draw_speeds(0, classes, rng)
                state.offset[moved] = leftover[moved]
            if leaving.any():
                state.remove(leaving)

    def _inject(self, state: SimulationState, dt: float, rng: np.random.Generator) -> None:
        if self.entrance_rate.size == 0:
            return
        probability = -np.expm1(-self.entrance_rate * dt)
        hits = np.flatnonzero(rng.random(self.entrance_rate.size) < probability)
        if hits.size == 0:
            return
        u = rng.random(hits.size)
        classes = np.minimum(np.searchsorted(self.entry_cdf, u, side="right"), self.entry_cdf.size - 1)
        speeds = self._draw_speeds(0, classes, rng)
        ranges = self._draw_ranges(hits.size, rng)
        state.append(self.entrance_street[hits], self.entrance_direction[hits], np.zeros(hits.size, dtype=np.int64),
                     np.zeros(hits.size), speeds, classes, ranges)

    def step(self, state: SimulationState, dt: float, rng: np.random.Generator) -> SimulationState:
        """
        Advance every vehicle by speed * dt, handle segment and street changes,
        then inject arrivals

        Args:
            state: State to advance in place
            dt: Time step (s)
            rng: Random generator

        Returns:
            The same state
        """
        if not dt > 0:
            raise SimulationError(f"dt must be > 0, got {dt}")
        if self.entrance_rate.size and float(self.entrance_rate.max()) * dt >= MAX_ARRIVAL_PROBABILITY:
            raise SimulationError(
                f"rate * dt = {float(self.entrance_rate.max()) * dt:.3f} >= {MAX_ARRIVAL_PROBABILITY}; "
                f"reduce simulation.dt"
            )
        distance = state.speed * dt
        state.offset = state.offset + distance
        state.travelled = state.travelled + distance
        self._cross_boundaries(state, rng)
        self._inject(state, dt, rng)
        state.time += dt
        state.steps += 1
        return state

    def snapshot(self, state: SimulationState) -> SimulationSnapshot:
        return snapshot_graph(state, self.topology, self.config.transmission.link_rule)


def default_warmup(config: RunConfig) -> float:
    """Three times the slowest expected street traversal time"""
    slowest = 0.0
    for segment in SEGMENTS:
        length = config.geometry.length(segment)
        slowest += max(1.0 / mean_service_rate(c, length) for c in config.speed_classes.for_segment(segment))
    return WARMUP_FACTOR * slowest


def _batch_statistics(samples: np.ndarray, batches: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean over samples and batch-means standard error along axis 0"""
    batch_means = np.stack([part.mean(axis=0) for part in np.array_split(samples, batches)])
    mean = samples.mean(axis=0)
    stderr = batch_means.std(axis=0, ddof=1) / math.sqrt(batches)
    return mean, stderr


@dataclass
class SimulationResult:
    times: np.ndarray
    street_open: np.ndarray
    observables: Dict[str, np.ndarray]
    node_counts: np.ndarray
    batches: int
    warmup: float
    injected: int
    exited: int
    in_system: int
    seed: int
    aggregates: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def batch_means(self, name: str) -> np.ndarray:
        return np.array([part.mean() for part in np.array_split(self.observables[name], self.batches)])

    def node_mean_counts(self) -> Tuple[np.ndarray, np.ndarray]:
        return _batch_statistics(self.node_counts.astype(float), self.batches)

    def street_open_frequency(self) -> Tuple[np.ndarray, np.ndarray]:
        return _batch_statistics(self.street_open.astype(float), self.batches)

    def aggregate_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"observable": name, "mean": mean, "stderr": stderr} for name, (mean, stderr) in self.aggregates.items()],
            columns=["observable", "mean", "stderr"],
        )

    def time_series_frame(self) -> pd.DataFrame:
        samples, streets = self.street_open.shape
        return pd.DataFrame({
            "time": np.repeat(self.times, streets),
            "street_id": np.tile(np.arange(streets), samples),
            "open": self.street_open.reshape(-1).astype(int),
        })


def run_simulation(config: RunConfig, topology: Optional[CityTopology] = None,
                   progress: bool = False) -> SimulationResult:
    """
    Simulate one timeline and aggregate snapshot statistics

    Args:
        config: Run configuration (simulation section, seed)
        topology: Optional prebuilt topology; built from config when omitted
        progress: Show a tqdm bar

    Returns:
        SimulationResult with batch-means standard errors
    """
    violations = validate_config(config)
    if violations:
        raise ConfigValidationError(violations)
    topology = topology or build_city(config)
    sim = config.simulation

    warmup = sim.warmup if sim.warmup is not None else default_warmup(config)
    measured = sim.run_length - warmup
    if measured <= 0:
        raise SimulationError(
            f"Warm-up {warmup:.1f} s leaves no measurement time in a run of {sim.run_length:.1f} s"
        )
    total_steps = int(round(sim.run_length / sim.dt))
    warmup_steps = int(round(warmup / sim.dt))
    sample_every = max(1, int(round(sim.sample_interval / sim.dt)))
    num_samples = (total_steps - warmup_steps) // sample_every
    if num_samples < sim.batches:
        raise SimulationError(
            f"{num_samples} snapshots after warm-up; at least {sim.batches} are needed for batch means"
        )

    simulator = VanetSimulator(topology, config)
    state = SimulationState()
    rng = np.random.default_rng(config.seed)
    snapshots: List[SimulationSnapshot] = []

    logger.info(f"Simulating {sim.run_length:.0f} s (warm-up {warmup:.0f} s, {num_samples} snapshots)")
    for step_index in tqdm(range(1, total_steps + 1), desc="Simulating", disable=not progress, leave=False):
        simulator.step(state, sim.dt, rng)
        after_warmup = step_index - warmup_steps
        if after_warmup > 0 and after_warmup % sample_every == 0 and len(snapshots) < num_samples:
            snapshots.append(simulator.snapshot(state))

    observables = {name: np.array([s.observables[name] for s in snapshots]) for name in SNAPSHOT_OBSERVABLES}
    result = SimulationResult(
        times=np.array([s.time for s in snapshots]),
        street_open=np.vstack([s.street_open for s in snapshots]),
        observables=observables,
        node_counts=np.vstack([s.segment_counts for s in snapshots]),
        batches=sim.batches,
        warmup=warmup,
        injected=state.injected,
        exited=state.exited,
        in_system=len(state),
        seed=config.seed,
    )
    for name, values in observables.items():
        mean, stderr = _batch_statistics(values, sim.batches)
        result.aggregates[name] = (float(mean), float(stderr))

    logger.info(
        f"Simulation done: {state.injected} vehicles injected, {state.exited} exited, "
        f"giant fraction {result.aggregates['giant_fraction'][0]:.4f}"
    )
    return result


def _run_seed(config: RunConfig, seed: int) -> SimulationResult:
    return run_simulation(replace(config, seed=int(seed)))


@dataclass
class ReplicationResult:
    results: List[SimulationResult]
    aggregates: Dict[str, Tuple[float, float]]


def run_replications(config: RunConfig, seeds: Sequence[int], n_jobs: int = 1) -> ReplicationResult:
    """
    Independent timelines in parallel, merged by pooling their batch means

    Args:
        config: Run configuration
        seeds: One seed per replication
        n_jobs: joblib workers

    Returns:
        ReplicationResult
    """
    if not seeds:
        raise SimulationError("At least one seed is required")
    results = Parallel(n_jobs=n_jobs)(delayed(_run_seed)(config, seed) for seed in seeds)
    aggregates = {}
    for name in SNAPSHOT_OBSERVABLES:
        pooled = np.concatenate([result.batch_means(name) for result in results])
        stderr = float(pooled.std(ddof=1) / math.sqrt(pooled.size)) if pooled.size > 1 else 0.0
        aggregates[name] = (float(pooled.mean()), stderr)
    return ReplicationResult(results=list(results), aggregates=aggregates)


def segment_count_histogram(result: SimulationResult, street_id: int, direction: int, segment) -> np.ndarray:
    """Histogram of the snapshot vehicle counts at one queue node"""
    node = street_id * 6 + direction * 3 + SEGMENTS.index(Segment(segment))
    return np.bincount(result.node_counts[:, node])
