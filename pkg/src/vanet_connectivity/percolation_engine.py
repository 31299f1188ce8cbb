#!/usr/bin/env python3
"""
Percolation Engine
Bond percolation on the open-boundary intersection lattice.

Microcanonical observables come from incremental sweeps that add the bonds in
random order while a union-find forest tracks the clusters; canonical curves
are the binomial mixture of the microcanonical ones. A direct Bernoulli
sampler handles streets with unequal probabilities.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .core_model import lattice_edges
from .exceptions import PercolationError, ThresholdNotFoundError

logger = logging.getLogger(__name__)

OBSERVABLES = ("giant_fraction", "avg_cluster_size", "perfect_connectivity", "susceptibility")
PRIMARY_OBSERVABLES = OBSERVABLES[:3]
EXHAUSTIVE_MAX_BONDS = 24


class UnionFind:
    """
    Disjoint-set forest with path compression and union by size

    parent[i] == -1 marks a root. On equal sizes the root with the larger
    index goes under the one with the smaller index.
    """

    def __init__(self, num_nodes: int):
        self.parent = [-1] * num_nodes
        self.size = [1] * num_nodes
        self.num_clusters = num_nodes
        self.max_cluster_size = 1 if num_nodes else 0
        self.sum_squares = num_nodes

    def __len__(self) -> int:
        return len(self.parent)

    def _check(self, node: int) -> None:
        if not 0 <= node < len(self.parent):
            raise PercolationError(f"Node {node} out of range [0, {len(self.parent)})")

    def find(self, node: int) -> int:
        self._check(node)
        parent = self.parent
        root = node
        while parent[root] != -1:
            root = parent[root]
        while node != root:
            following = parent[node]
            parent[node] = root
            node = following
        return root

    def union(self, a: int, b: int) -> bool:
        root_a, root_b = self.find(a), self.find(b)
        if root_a == root_b:
            return False
        size_a, size_b = self.size[root_a], self.size[root_b]
        if size_a < size_b or (size_a == size_b and root_a > root_b):
            root_a, root_b = root_b, root_a
            size_a, size_b = size_b, size_a
        self.parent[root_b] = root_a
        merged = size_a + size_b
        self.size[root_a] = merged
        self.num_clusters -= 1
        self.sum_squares += 2 * size_a * size_b
        if merged > self.max_cluster_size:
            self.max_cluster_size = merged
        return True

    def roots(self) -> List[int]:
        return [i for i, p in enumerate(self.parent) if p == -1]

    def cluster_sizes(self) -> List[int]:
        return [self.size[root] for root in self.roots()]


def uf_find(state: UnionFind, node: int) -> int:
    return state.find(node)


def uf_union(state: UnionFind, a: int, b: int) -> bool:
    return state.union(a, b)


def _observables(num_nodes: int, max_size, num_clusters, sum_squares) -> Dict[str, np.ndarray]:
    max_size = np.asarray(max_size, dtype=float)
    num_clusters = np.asarray(num_clusters, dtype=float)
    rest = num_nodes - max_size
    rest_squares = np.asarray(sum_squares, dtype=float) - max_size ** 2
    susceptibility = np.divide(rest_squares, rest, out=np.zeros_like(rest), where=rest > 0)
    return {
        "giant_fraction": max_size / num_nodes,
        "avg_cluster_size": num_nodes / num_clusters,
        "perfect_connectivity": (num_clusters == 1).astype(float),
        "susceptibility": susceptibility,
    }


def state_observables(state: UnionFind) -> Dict[str, float]:
    values = _observables(len(state), [state.max_cluster_size], [state.num_clusters], [state.sum_squares])
    return {name: float(array[0]) for name, array in values.items()}


@lru_cache(maxsize=None)
def lattice_bonds(side: int) -> Tuple[np.ndarray, np.ndarray]:
    """Bond endpoints of the side x side lattice, in street order"""
    if side < 2:
        raise PercolationError(f"Lattice side must be >= 2, got {side}")
    edges = lattice_edges(side, side)
    a = np.array([edge[0] for edge in edges], dtype=np.int64)
    b = np.array([edge[1] for edge in edges], dtype=np.int64)
    a.setflags(write=False)
    b.setflags(write=False)
    return a, b


def microcanonical_sweep(side: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Add the bonds of the lattice in uniformly random order

    Args:
        side: Lattice side N_g
        rng: Random generator driving the shuffle

    Returns:
        Observable name -> array over bond count m = 0..M
    """
    bonds_a, bonds_b = lattice_bonds(side)
    num_nodes = side * side
    M = len(bonds_a)
    order = rng.permutation(M)
    a_list, b_list = bonds_a[order].tolist(), bonds_b[order].tolist()

    state = UnionFind(num_nodes)
    max_size = [state.max_cluster_size]
    clusters = [state.num_clusters]
    squares = [state.sum_squares]
    for a, b in zip(a_list, b_list):
        state.union(a, b)
        max_size.append(state.max_cluster_size)
        clusters.append(state.num_clusters)
        squares.append(state.sum_squares)

    return _observables(num_nodes, max_size, clusters, squares)


@dataclass
class MicrocanonicalRecord:
    """Per bond count m: mean and standard error of every observable"""
    side: int
    iterations: int
    means: Dict[str, np.ndarray]
    stderrs: Dict[str, np.ndarray]
    exact: bool = False

    @property
    def M(self) -> int:
        return len(next(iter(self.means.values()))) - 1

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for name in self.means:
            frames.append(pd.DataFrame({
                "m": np.arange(self.M + 1),
                "observable": name,
                "mean": self.means[name],
                "stderr": self.stderrs[name],
            }))
        return pd.concat(frames, ignore_index=True)


@dataclass
class PercolationCurve:
    """Canonical observables Q(p) over a probability grid"""
    side: int
    p: np.ndarray
    values: Dict[str, np.ndarray]
    stderrs: Dict[str, np.ndarray]
    M: int = 0

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for name in self.values:
            frames.append(pd.DataFrame({
                "p": self.p,
                "observable": name,
                "mean": self.values[name],
                "stderr": self.stderrs[name],
            }))
        return pd.concat(frames, ignore_index=True)


@dataclass
class ObservableEstimate:
    """Means and standard errors of the observables from direct sampling"""
    means: Dict[str, float]
    stderrs: Dict[str, float]
    iterations: int
    samples: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _sweep_chunk(side: int, seeds: Sequence[np.random.SeedSequence],
                 progress: bool = False) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    sums: Dict[str, np.ndarray] = {}
    squares: Dict[str, np.ndarray] = {}
    for seed in tqdm(seeds, desc=f"Sweeps (side={side})", disable=not progress, leave=False):
        sweep = microcanonical_sweep(side, np.random.default_rng(seed))
        for name, values in sweep.items():
            if name not in sums:
                sums[name] = np.zeros_like(values)
                squares[name] = np.zeros_like(values)
            sums[name] += values
            squares[name] += values * values
    return sums, squares


def _mean_and_stderr(total: np.ndarray, total_squares: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
    mean = total / count
    if count < 2:
        return mean, np.zeros_like(mean)
    variance = np.clip((total_squares - count * mean * mean) / (count - 1), 0.0, None)
    return mean, np.sqrt(variance / count)


def accumulate_sweeps(side: int, iterations: int, seed: int, n_jobs: int = 1,
                      progress: bool = False) -> MicrocanonicalRecord:
    """
    Average microcanonical sweeps

    Args:
        side: Lattice side N_g
        iterations: Number of sweeps
        seed: Master seed; sweep k uses child stream k of SeedSequence(seed)
        n_jobs: joblib workers; chunks merge in chunk order
        progress: Show a tqdm bar

    Returns:
        MicrocanonicalRecord with mean and standard error per m
    """
    if iterations < 1:
        raise PercolationError(f"iterations must be >= 1, got {iterations}")
    children = np.random.SeedSequence(seed).spawn(iterations)

    if n_jobs == 1:
        chunks = [_sweep_chunk(side, children, progress)]
    else:
        workers = n_jobs if n_jobs > 0 else max(1, iterations)
        parts = [part for part in np.array_split(np.arange(iterations), min(workers, iterations)) if part.size]
        chunks = Parallel(n_jobs=n_jobs)(
            delayed(_sweep_chunk)(side, [children[i] for i in part]) for part in parts
        )

    means: Dict[str, np.ndarray] = {}
    stderrs: Dict[str, np.ndarray] = {}
    for name in OBSERVABLES:
        total = chunks[0][0][name].copy()
        total_squares = chunks[0][1][name].copy()
        for sums, squares in chunks[1:]:
            total += sums[name]
            total_squares += squares[name]
        means[name], stderrs[name] = _mean_and_stderr(total, total_squares, iterations)

    logger.debug(f"Accumulated {iterations} sweeps on a {side}x{side} lattice")
    return MicrocanonicalRecord(side=side, iterations=iterations, means=means, stderrs=stderrs)


def exhaustive_microcanonical(side: int) -> MicrocanonicalRecord:
    """
    Exact microcanonical averages by enumerating every bond subset

    Only for tiny lattices: the number of subsets is 2^M with M <= 24.
    """
    bonds_a, bonds_b = lattice_bonds(side)
    M = len(bonds_a)
    if M > EXHAUSTIVE_MAX_BONDS:
        raise PercolationError(f"Exhaustive enumeration is capped at M <= {EXHAUSTIVE_MAX_BONDS} bonds, got {M}")

    num_nodes = side * side
    a_list, b_list = bonds_a.tolist(), bonds_b.tolist()
    parent = list(range(num_nodes))
    size = [1] * num_nodes
    sums = {name: [0.0] * (M + 1) for name in OBSERVABLES}
    counts = [0] * (M + 1)

    def find(node):
        while parent[node] != node:
            node = parent[node]
        return node

    def record(m):
        sizes = [size[i] for i in range(num_nodes) if parent[i] == i]
        values = _observables(num_nodes, [max(sizes)], [len(sizes)], [sum(s * s for s in sizes)])
        for name in OBSERVABLES:
            sums[name][m] += float(values[name][0])
        counts[m] += 1

    def visit(bond, m):
        if bond == M:
            record(m)
            return
        visit(bond + 1, m)
        root_a, root_b = find(a_list[bond]), find(b_list[bond])
        if root_a == root_b:
            visit(bond + 1, m + 1)
            return
        if size[root_a] < size[root_b]:
            root_a, root_b = root_b, root_a
        parent[root_b] = root_a
        size[root_a] += size[root_b]
        visit(bond + 1, m + 1)
        size[root_a] -= size[root_b]
        parent[root_b] = root_b

    visit(0, 0)
    means = {name: np.array(sums[name]) / np.array(counts, dtype=float) for name in OBSERVABLES}
    stderrs = {name: np.zeros(M + 1) for name in OBSERVABLES}
    return MicrocanonicalRecord(side=side, iterations=0, means=means, stderrs=stderrs, exact=True)


def binomial_weights(M: int, p: float, m_range: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Binomial(M, p) probabilities without overflow

    The weight at the mode floor((M+1)p) is set to one, the others follow from
    the ratio of consecutive terms, and the vector is normalized.

    Args:
        M: Number of bonds
        p: Bond probability
        m_range: Optional subset of bond counts to return

    Returns:
        Weights over m = 0..M (or over m_range)
    """
    if not 0 <= p <= 1:
        raise PercolationError(f"p must lie in [0, 1], got {p}")
    weights = np.zeros(M + 1)
    if p == 0:
        weights[0] = 1.0
    elif p == 1:
        weights[M] = 1.0
    else:
        mode = min(int(math.floor((M + 1) * p)), M)
        odds = p / (1.0 - p)
        weights[mode] = 1.0
        if mode < M:
            k = np.arange(mode, M)
            weights[mode + 1:] = np.cumprod((M - k) / (k + 1) * odds)
        if mode > 0:
            k = np.arange(mode, 0, -1)
            weights[mode - 1::-1] = np.cumprod(k / (M - k + 1) / odds)
        weights /= weights.sum()
    if m_range is not None:
        return weights[np.asarray(m_range, dtype=int)]
    return weights


def canonical_convolve(record: MicrocanonicalRecord, p_grid: Sequence[float]) -> PercolationCurve:
    """
    Mix microcanonical observables over Binomial(M, p) bond counts

    Errors propagate as the weighted sum of the per-m standard errors.
    """
    p_values = np.asarray(p_grid, dtype=float)
    M = record.M
    weights = np.vstack([binomial_weights(M, p) for p in p_values]) if p_values.size else np.zeros((0, M + 1))
    values = {name: weights @ record.means[name] for name in record.means}
    stderrs = {name: weights @ record.stderrs[name] for name in record.stderrs}
    return PercolationCurve(side=record.side, p=p_values, values=values, stderrs=stderrs, M=M)


def _side_from_bonds(num_bonds: int) -> int:
    side = int(round((1 + math.sqrt(1 + 2 * num_bonds)) / 2))
    if 2 * side * (side - 1) != num_bonds:
        raise PercolationError(f"{num_bonds} edge probabilities do not form a square lattice")
    return side


def _direct_chunk(side: int, probs: np.ndarray, seeds: Sequence[np.random.SeedSequence]) -> Dict[str, np.ndarray]:
    bonds_a, bonds_b = lattice_bonds(side)
    samples = {name: [] for name in OBSERVABLES}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        open_bonds = np.flatnonzero(rng.random(len(probs)) < probs)
        state = UnionFind(side * side)
        for a, b in zip(bonds_a[open_bonds].tolist(), bonds_b[open_bonds].tolist()):
            state.union(a, b)
        for name, value in state_observables(state).items():
            samples[name].append(value)
    return {name: np.asarray(values) for name, values in samples.items()}


def inhomogeneous_sample(edge_probs: Sequence[float], iterations: int, seed: int,
                         n_jobs: int = 1) -> ObservableEstimate:
    """
    Direct Bernoulli sampling with one probability per street

    Args:
        edge_probs: Open probability per street, in street order
        iterations: Number of lattice realizations
        seed: Master seed
        n_jobs: joblib workers

    Returns:
        ObservableEstimate with means and standard errors
    """
    probs = np.asarray(edge_probs, dtype=float)
    if np.any((probs < 0) | (probs > 1)):
        raise PercolationError("Edge probabilities must lie in [0, 1]")
    if iterations < 1:
        raise PercolationError(f"iterations must be >= 1, got {iterations}")
    side = _side_from_bonds(len(probs))
    children = np.random.SeedSequence(seed).spawn(iterations)

    if n_jobs == 1:
        parts = [_direct_chunk(side, probs, children)]
    else:
        workers = n_jobs if n_jobs > 0 else iterations
        splits = [part for part in np.array_split(np.arange(iterations), min(workers, iterations)) if part.size]
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_direct_chunk)(side, probs, [children[i] for i in part]) for part in splits
        )

    samples = {name: np.concatenate([part[name] for part in parts]) for name in OBSERVABLES}
    means = {name: float(values.mean()) for name, values in samples.items()}
    stderrs = {
        name: float(values.std(ddof=1) / math.sqrt(iterations)) if iterations > 1 else 0.0
        for name, values in samples.items()
    }
    return ObservableEstimate(means=means, stderrs=stderrs, iterations=iterations, samples=samples)


def bound_curves(edge_probs: Sequence[float], record: MicrocanonicalRecord) -> Tuple[PercolationCurve, PercolationCurve]:
    """Homogeneous curves at the smallest and the largest street probability"""
    probs = np.asarray(edge_probs, dtype=float)
    if probs.size == 0:
        raise PercolationError("No edge probabilities given")
    lower = canonical_convolve(record, [float(probs.min())])
    upper = canonical_convolve(record, [float(probs.max())])
    return lower, upper


def _first_crossing(p: np.ndarray, values: np.ndarray, level: float) -> float:
    for i in range(len(p) - 1):
        if values[i] == level:
            return float(p[i])
        if values[i] < level < values[i + 1] or (values[i] < level and values[i + 1] == level):
            fraction = (level - values[i]) / (values[i + 1] - values[i])
            return float(p[i] + fraction * (p[i + 1] - p[i]))
    if len(p) and values[-1] == level:
        return float(p[-1])
    raise ThresholdNotFoundError(f"No upward crossing of {level} on the grid [{p[0] if len(p) else '-'}, "
                                 f"{p[-1] if len(p) else '-'}]")


def estimate_threshold(curve: PercolationCurve, observable: str = "giant_fraction", level: float = 0.5) -> float:
    """Linear interpolation of the first upward crossing of level"""
    return _first_crossing(curve.p, curve.values[observable], level)


def transition_width(curve: PercolationCurve, low: float = 0.1, high: float = 0.9,
                     observable: str = "giant_fraction") -> float:
    """p where the observable first reaches high minus p where it first reaches low"""
    return _first_crossing(curve.p, curve.values[observable], high) - \
        _first_crossing(curve.p, curve.values[observable], low)
