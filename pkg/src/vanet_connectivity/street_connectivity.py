#!/usr/bin/env python3
"""
Street Connectivity
Turns segment densities and transmission ranges into the probability that a
street supports an end-to-end multi-hop path.

Single range: exact one-dimensional connectivity of Poisson nodes on the
middle part, times "at least one node" on the front and end parts.
Two ranges: a lower bound built from inclusion-exclusion over uniform
spacings, mixed over the number of long-range nodes and the Poisson count.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import gammaln
from scipy.stats import binom, poisson

from .core_model import CityTopology, RunConfig, Segment
from .exceptions import ConnectivityError
from .traffic_solver import TrafficSolution, segment_densities

logger = logging.getLogger(__name__)

LOG_BINOMIAL_THRESHOLD = 60
BASE_EPSILON = 1e-13
POISSON_TAIL_TOLERANCE = 1e-10
PATTERN_WEIGHT_FLOOR = 1e-18

FORMULAS = ("exact", "approximate")
ORIENTATIONS = ("type1_probability", "printed")
LINK_RULES = ("max", "min")


class ConnectivityMode(str, Enum):
    EXACT_SINGLE_RANGE = "exact_single_range"
    HETERO_LOWER_BOUND = "hetero_lower_bound"


@dataclass(frozen=True)
class SingleRangeInputs:
    rho1: float
    rho2: float
    rho3: float
    R: float
    D: float

    def __post_init__(self):
        if min(self.rho1, self.rho2, self.rho3) < 0:
            raise ConnectivityError(f"Densities must be >= 0, got ({self.rho1}, {self.rho2}, {self.rho3})")
        if not self.R > 0 or not self.D > 0:
            raise ConnectivityError(f"R and D must be > 0, got R={self.R}, D={self.D}")


@dataclass(frozen=True)
class HeteroRangeInputs:
    """Two-range inputs; p is the probability that a node has the short range x1"""
    rho1: float
    rho2: float
    rho3: float
    x1: float
    x2: float
    p: float
    D: float

    def __post_init__(self):
        if min(self.rho1, self.rho2, self.rho3) < 0:
            raise ConnectivityError(f"Densities must be >= 0, got ({self.rho1}, {self.rho2}, {self.rho3})")
        # x1 == x2 is accepted so the bound can be compared with the single-range formula
        if not 0 < self.x1 <= self.x2:
            raise ConnectivityError(f"0 < x1 <= x2 required, got x1={self.x1}, x2={self.x2}")
        if not 0 <= self.p <= 1:
            raise ConnectivityError(f"p must lie in [0, 1], got {self.p}")
        if not self.D > 0:
            raise ConnectivityError(f"D must be > 0, got {self.D}")


@dataclass
class StreetConnectivity:
    street_id: Optional[int]
    p_open: float
    mode: ConnectivityMode
    inputs: object = field(repr=False)

    def to_row(self) -> Dict[str, object]:
        inputs = self.inputs
        hetero = self.mode == ConnectivityMode.HETERO_LOWER_BOUND
        return {
            "street_id": self.street_id,
            "rho1": inputs.rho1,
            "rho2": inputs.rho2,
            "rho3": inputs.rho3,
            "R_or_x1": inputs.x1 if hetero else inputs.R,
            "x2_or_blank": inputs.x2 if hetero else None,
            "p_type1_or_blank": inputs.p if hetero else None,
            "p_open": self.p_open,
            "mode": self.mode.value,
        }


def _clamp(value: float) -> float:
    return min(1.0, max(0.0, value))


def _log_comb(n: int, k: int) -> float:
    if k < 0 or k > n or n < 0:
        return -math.inf
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def _log_compositions(n: int, k: int) -> float:
    """log of the number of ways to write n as an ordered sum of k positive parts"""
    if n == 0 and k == 0:
        return 0.0
    if n < 1 or k < 1 or k > n:
        return -math.inf
    return _log_comb(n - 1, k - 1)


def _poisson_support(rho: float) -> Tuple[np.ndarray, np.ndarray, float]:
    if rho == 0:
        return np.zeros(1, dtype=int), np.ones(1), 0.0
    n_max = max(50, int(math.ceil(rho + 12.0 * math.sqrt(rho))))
    counts = np.arange(n_max + 1)
    weights = poisson.pmf(counts, rho)
    tail = float(poisson.sf(n_max, rho))
    if tail > POISSON_TAIL_TOLERANCE:
        logger.warning(f"Poisson truncation tail {tail:.2e} exceeds {POISSON_TAIL_TOLERANCE:.0e} (rho={rho})")
    return counts, weights, tail


# ---------------------------------------------------------------------------
# Single transmission range
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _p_connect_uniform(n: int, R: float, D: float) -> float:
    if R >= D:
        return 1.0
    m = min(n + 1, int(math.floor(D / R)))
    use_logs = n > LOG_BINOMIAL_THRESHOLD
    terms = []
    for i in range(m + 1):
        base = (D - i * R) / D
        if base <= 0:
            break
        if use_logs:
            magnitude = math.exp(_log_comb(n + 1, i) + n * math.log(base))
        else:
            magnitude = math.comb(n + 1, i) * base ** n
        terms.append(-magnitude if i % 2 else magnitude)
    return _clamp(math.fsum(terms))


def p_connect_uniform(n: int, R: float, D: float) -> float:
    """
    Probability that n uniform points on [0, D], together with both
    endpoints, leave no gap longer than R

    Args:
        n: Number of points
        R: Transmission range (m)
        D: Interval length (m)

    Returns:
        Probability in [0, 1]
    """
    if n < 0:
        raise ConnectivityError(f"Node count must be >= 0, got {n}")
    if not R > 0 or not D > 0:
        raise ConnectivityError(f"R and D must be > 0, got R={R}, D={D}")
    return _p_connect_uniform(int(n), float(R), float(D))


def p_connect_middle_bracket(rho2: float, R: float, D: float) -> Tuple[float, float]:
    """Truncated Poisson mixture and the same value plus the neglected tail mass"""
    if rho2 < 0:
        raise ConnectivityError(f"rho2 must be >= 0, got {rho2}")
    if R >= D:
        return 1.0, 1.0
    if rho2 == 0:
        value = p_connect_uniform(0, R, D)
        return value, value
    counts, weights, tail = _poisson_support(rho2)
    conditional = [p_connect_uniform(int(n), R, D) for n in counts]
    value = _clamp(math.fsum(w * c for w, c in zip(weights, conditional)))
    return value, _clamp(value + tail)


def p_connect_middle(rho2: float, R: float, D: float) -> float:
    """Connectivity of the middle part with Poisson(rho2) nodes"""
    return p_connect_middle_bracket(rho2, R, D)[0]


def p_connect_street(inputs: SingleRangeInputs, street_id: Optional[int] = None) -> StreetConnectivity:
    """(1 - e^-rho1) * P(middle connected) * (1 - e^-rho3)"""
    middle = p_connect_middle(inputs.rho2, inputs.R, inputs.D)
    p_open = -math.expm1(-inputs.rho1) * middle * -math.expm1(-inputs.rho3)
    return StreetConnectivity(street_id, _clamp(p_open), ConnectivityMode.EXACT_SINGLE_RANGE, inputs)


# ---------------------------------------------------------------------------
# Two transmission ranges
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _spacing_ie_prob(n1: int, n2: int, x1: float, x2: float, N: int) -> float:
    threshold = 0.0 if N == 0 else BASE_EPSILON
    use_logs = N > LOG_BINOMIAL_THRESHOLD
    terms = []
    for l in range(n1 + 1):
        if 1.0 - l * x1 <= threshold:
            break
        for j in range(n2 + 1):
            base = 1.0 - l * x1 - j * x2
            if base <= threshold:
                break
            if use_logs:
                magnitude = math.exp(_log_comb(n1, l) + _log_comb(n2, j) + N * math.log(base))
            else:
                magnitude = math.comb(n1, l) * math.comb(n2, j) * base ** N
            terms.append(-magnitude if (l + j) % 2 else magnitude)
    return _clamp(math.fsum(terms))


def spacing_ie_prob(n1: int, n2: int, x1: float, x2: float, N: int) -> float:
    """
    Probability that a designated n1 of the N+1 spacings of N uniform points
    on the unit interval are at most x1 and the other n2 at most x2

    Args:
        n1: Spacings bounded by x1
        n2: Spacings bounded by x2
        x1: Normalized short range
        x2: Normalized long range
        N: Number of points

    Returns:
        Probability in [0, 1]
    """
    if n1 < 0 or n2 < 0 or n1 + n2 != N + 1:
        raise ConnectivityError(f"n1 + n2 must equal N + 1, got n1={n1}, n2={n2}, N={N}")
    if not x1 > 0 or not x2 > 0:
        raise ConnectivityError(f"Normalized ranges must be > 0, got x1={x1}, x2={x2}")
    return _spacing_ie_prob(int(n1), int(n2), float(x1), float(x2), int(N))


def _bound_terms(N: int, r: int, formula: str) -> List[Tuple[float, int, int]]:
    """(log multiplicity, n1, n2) for every spacing pattern with r long-range nodes"""
    terms = []
    for q in range(1, r + 1):
        log_blocks = _log_comb(r - 1, q - 1)
        if formula == "approximate":
            candidates = [(_log_comb(N - r + 1, q), N + 1 - r + q, r - q)]
        else:
            # no block touching an end, one end (two ways), both ends
            candidates = [
                (_log_compositions(N - r, q + 1), N + 1 - r + q, r - q),
                (math.log(2.0) + _log_compositions(N - r, q), N - r + q, r - q + 1),
                (_log_compositions(N - r, q - 1), N - 1 - r + q, r - q + 2),
            ]
        for log_count, n1, n2 in candidates:
            if log_count > -math.inf:
                terms.append((log_blocks + log_count, n1, n2))
    return terms


@lru_cache(maxsize=None)
def _normalized_bound(N: int, r: int, x1: float, x2: float, formula: str, orientation: str) -> float:
    """Q(r, N) / C(N, r)"""
    if r == 0:
        if orientation == "printed":
            return spacing_ie_prob(0, N + 1, x1, x2, N)
        return spacing_ie_prob(N + 1, 0, x1, x2, N)
    log_total = _log_comb(N, r)
    return math.fsum(
        math.exp(log_count - log_total) * spacing_ie_prob(n1, n2, x1, x2, N)
        for log_count, n1, n2 in _bound_terms(N, r, formula)
    )


def _check_switches(formula: str, orientation: str) -> None:
    if formula not in FORMULAS:
        raise ConnectivityError(f"Unknown bound formula '{formula}', expected one of {FORMULAS}")
    if orientation not in ORIENTATIONS:
        raise ConnectivityError(f"Unknown weight orientation '{orientation}', expected one of {ORIENTATIONS}")


def hetero_bound_given_n(N: int, r: int, x1: float, x2: float, formula: str = "exact",
                         orientation: str = "type1_probability") -> float:
    """
    Connectivity weight of the middle part given N nodes of which r have the
    long range x2 (ranges normalized by D)

    The approximate formula is the classic single-term count
    sum_q C(r-1, r-q) C(N-r+1, q) p(N+1-r+q, r-q): it charges r - q long
    spacings for q blocks of long-range nodes and treats both end spacings
    as short. The exact formula, used by default, splits each q by whether
    a block touches one or both interval ends and credits those end
    spacings with x2. It is never below the approximate value, so both
    remain lower bounds under the max link rule.

    Args:
        N: Number of nodes
        r: Number of long-range nodes
        x1: Normalized short range
        x2: Normalized long range
        formula: "exact" (default, four-case count) or "approximate" (single-term count)
        orientation: "type1_probability" or "printed" (r = 0 term uses x2 spacings)

    Returns:
        Sum over spacing patterns of pattern count times spacing probability
    """
    if not 0 <= r <= N:
        raise ConnectivityError(f"0 <= r <= N required, got r={r}, N={N}")
    _check_switches(formula, orientation)
    return math.exp(_log_comb(N, r)) * _normalized_bound(int(N), int(r), float(x1), float(x2), formula, orientation)


def _pattern_weights(N: int, prob: float) -> np.ndarray:
    """Binomial(N, prob) pmf over r = 0..N with exact endpoints"""
    if prob <= 0.0:
        weights = np.zeros(N + 1)
        weights[0] = 1.0
        return weights
    if prob >= 1.0:
        weights = np.zeros(N + 1)
        weights[N] = 1.0
        return weights
    return binom.pmf(np.arange(N + 1), N, prob)


def hetero_middle_bound(rho2: float, x1: float, x2: float, p: float, D: float,
                        formula: str = "exact", orientation: str = "type1_probability") -> float:
    """
    Poisson mixture of the pattern-weighted bound for the middle part

    With no middle nodes the span is bridged from an end section; under the
    type1_probability weighting that node has the long range with
    probability 1 - p, so x2 >= D contributes that share.
    """
    _check_switches(formula, orientation)
    if x1 >= D:
        return 1.0
    a1, a2 = x1 / D, x2 / D
    long_range_prob = (1.0 - p) if orientation == "type1_probability" else p
    if orientation == "type1_probability" and long_range_prob >= 1.0:
        return p_connect_middle(rho2, x2, D)
    counts, weights, _ = _poisson_support(rho2)

    total = []
    for n, weight in zip(counts, weights):
        if weight == 0.0:
            continue
        n = int(n)
        if n == 0 and orientation == "type1_probability":
            total.append(weight * (long_range_prob if x2 >= D else 0.0))
            continue
        pattern = _pattern_weights(n, long_range_prob)
        inner = math.fsum(
            pattern[r] * _normalized_bound(n, r, a1, a2, formula, orientation)
            for r in range(n + 1) if pattern[r] > PATTERN_WEIGHT_FLOOR
        )
        total.append(weight * inner)
    return _clamp(math.fsum(total))


def hetero_lower_bound_street(inputs: HeteroRangeInputs, formula: str = "exact",
                              orientation: str = "type1_probability",
                              street_id: Optional[int] = None) -> StreetConnectivity:
    """
    Lower bound on street connectivity with two transmission ranges

    Args:
        inputs: Densities, ranges, short-range probability and D
        formula: "exact" or "approximate" spacing count
        orientation: Pattern weight orientation
        street_id: Optional street id carried into the record

    Returns:
        StreetConnectivity with mode hetero_lower_bound
    """
    middle = hetero_middle_bound(inputs.rho2, inputs.x1, inputs.x2, inputs.p, inputs.D, formula, orientation)
    p_open = -math.expm1(-inputs.rho1) * middle * -math.expm1(-inputs.rho3)
    return StreetConnectivity(street_id, _clamp(p_open), ConnectivityMode.HETERO_LOWER_BOUND, inputs)


# ---------------------------------------------------------------------------
# City level
# ---------------------------------------------------------------------------

def street_probabilities(topology: CityTopology, solution: TrafficSolution,
                         config: RunConfig) -> List[StreetConnectivity]:
    """
    Edge-open probability of every street of a solved city

    Args:
        topology: City topology
        solution: Traffic solution for that topology
        config: Run configuration (transmission section)

    Returns:
        One StreetConnectivity per street, in street id order
    """
    tx = config.transmission
    geometry = config.geometry
    if max(geometry.len_front, geometry.len_end) > tx.min_range:
        logger.warning(
            f"Front/end sections ({geometry.len_front}/{geometry.len_end} m) are longer than the "
            f"transmission range {tx.min_range} m; the at-least-one-node factor is optimistic"
        )

    records = []
    for street in topology.streets:
        rho1, rho2, rho3 = (segment_densities(solution, street.id, segment) for segment in
                            (Segment.FRONT, Segment.MIDDLE, Segment.END))
        if tx.is_dual:
            inputs = HeteroRangeInputs(rho1, rho2, rho3, tx.x1, tx.x2, tx.p_type1, geometry.D)
            records.append(hetero_lower_bound_street(inputs, tx.bound_formula, tx.weight_orientation, street.id))
        else:
            inputs = SingleRangeInputs(rho1, rho2, rho3, tx.range_m, geometry.D)
            records.append(p_connect_street(inputs, street.id))

    values = [record.p_open for record in records]
    logger.debug(f"Street probabilities: min {min(values):.4f}, max {max(values):.4f}")
    return records


def connectivity_frame(records: List[StreetConnectivity]) -> pd.DataFrame:
    columns = ["street_id", "rho1", "rho2", "rho3", "R_or_x1", "x2_or_blank", "p_type1_or_blank", "p_open", "mode"]
    return pd.DataFrame([record.to_row() for record in records], columns=columns)


# ---------------------------------------------------------------------------
# Monte-Carlo oracle
# ---------------------------------------------------------------------------

def _connected_rows(rng: np.random.Generator, n: int, rows: int, D: float, x1: float,
                    x2: Optional[float], p_type1: float, link_rule: str) -> np.ndarray:
    combine = np.maximum if link_rule == "max" else np.minimum
    if n == 0:
        if x2 is None:
            return np.full(rows, D <= x1)
        # the two end-section nodes face each other across the whole span
        ends = np.where(rng.random((rows, 2)) < p_type1, x1, x2)
        return combine(ends[:, 0], ends[:, 1]) >= D
    positions = np.sort(rng.uniform(0.0, D, size=(rows, n)), axis=1)
    if x2 is None:
        ranges = np.full((rows, n), x1)
    else:
        ranges = np.where(rng.random((rows, n)) < p_type1, x1, x2)
    edges = np.concatenate([np.zeros((rows, 1)), positions, np.full((rows, 1), D)], axis=1)
    gaps = np.diff(edges, axis=1)
    allowed = np.concatenate([ranges[:, :1], combine(ranges[:, :-1], ranges[:, 1:]), ranges[:, -1:]], axis=1)
    return np.all(gaps <= allowed, axis=1)


def monte_carlo_street(rho1: float, rho2: float, rho3: float, D: float, x1: float,
                       x2: Optional[float] = None, p_type1: float = 1.0, link_rule: str = "max",
                       trials: int = 100000, seed: int = 0,
                       middle_only: bool = False) -> Tuple[float, float]:
    """
    Estimate street connectivity by sampling Poisson nodes

    Args:
        rho1, rho2, rho3: Poisson means of the three sections
        D: Middle-section length (m)
        x1: Range of every node, or the short range when x2 is given
        x2: Optional long range
        p_type1: Probability a node has range x1
        link_rule: "max" or "min" over the two adjacent ranges
        trials: Number of samples
        seed: RNG seed
        middle_only: Ignore the front/end at-least-one-node factors

    Returns:
        (estimate, standard error)
    """
    if link_rule not in LINK_RULES:
        raise ConnectivityError(f"Unknown link rule '{link_rule}'")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(rho2, size=trials)
    connected = np.zeros(trials, dtype=bool)
    for n in np.unique(counts):
        rows = np.flatnonzero(counts == n)
        connected[rows] = _connected_rows(rng, int(n), rows.size, D, x1, x2, p_type1, link_rule)
    if not middle_only:
        connected &= rng.poisson(rho1, size=trials) > 0
        connected &= rng.poisson(rho3, size=trials) > 0
    estimate = float(connected.mean())
    stderr = math.sqrt(max(estimate * (1.0 - estimate), 0.0) / trials)
    return estimate, stderr
