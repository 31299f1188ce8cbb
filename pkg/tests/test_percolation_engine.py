#!/usr/bin/env python3
"""
Unit tests for the bond percolation engine
"""

import os
import sys
import unittest

import numpy as np
from scipy.stats import binom

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from vanet_connectivity.exceptions import PercolationError, ThresholdNotFoundError
from vanet_connectivity.percolation_engine import (
    OBSERVABLES,
    PercolationCurve,
    UnionFind,
    accumulate_sweeps,
    binomial_weights,
    bound_curves,
    canonical_convolve,
    estimate_threshold,
    exhaustive_microcanonical,
    inhomogeneous_sample,
    lattice_bonds,
    state_observables,
    transition_width,
    uf_find,
    uf_union,
)

RUN_SLOW = os.getenv("VANET_RUN_SLOW") == "1"


class TestUnionFind(unittest.TestCase):
    """Test cases for the union-find forest"""

    def setUp(self):
        """Set up test fixtures"""
        self.state = UnionFind(6)

    def test_initial_state(self):
        """Every node starts as its own root"""
        self.assertEqual(self.state.roots(), list(range(6)))
        self.assertEqual(self.state.num_clusters, 6)
        self.assertEqual(self.state.max_cluster_size, 1)

    def test_union_tracks_sizes(self):
        """Cluster count, largest cluster and sum of squares follow the merges"""
        self.assertTrue(uf_union(self.state, 0, 1))
        self.assertTrue(uf_union(self.state, 1, 2))
        self.assertFalse(uf_union(self.state, 0, 2))
        self.assertEqual(self.state.num_clusters, 4)
        self.assertEqual(self.state.max_cluster_size, 3)
        self.assertEqual(self.state.sum_squares, 9 + 1 + 1 + 1)
        self.assertEqual(sorted(self.state.cluster_sizes()), [1, 1, 1, 3])

    def test_tie_goes_to_smaller_index(self):
        """Equal sizes: the larger-index root goes under the smaller-index root"""
        uf_union(self.state, 3, 1)
        self.assertEqual(uf_find(self.state, 3), 1)
        self.assertEqual(self.state.parent[3], 1)
        self.assertEqual(self.state.parent[1], -1)

    def test_path_compression(self):
        """After find every node on the path points at the root"""
        for a, b in ((0, 1), (2, 3), (0, 2), (4, 5), (0, 4)):
            uf_union(self.state, a, b)
        root = uf_find(self.state, 5)
        for node in range(6):
            self.assertEqual(uf_find(self.state, node), root)
            self.assertIn(self.state.parent[node], (-1, root))

    def test_out_of_range(self):
        """Unknown nodes raise PercolationError"""
        with self.assertRaises(PercolationError):
            uf_find(self.state, 6)

    def test_state_observables(self):
        """Observables of a partial state"""
        uf_union(self.state, 0, 1)
        values = state_observables(self.state)
        self.assertAlmostEqual(values["giant_fraction"], 2 / 6)
        self.assertAlmostEqual(values["avg_cluster_size"], 6 / 5)
        self.assertEqual(values["perfect_connectivity"], 0.0)
        self.assertAlmostEqual(values["susceptibility"], 1.0)


class TestMicrocanonical(unittest.TestCase):
    """Test cases for sweeps and exact enumeration"""

    def test_lattice_bonds(self):
        """2 N (N - 1) bonds in street order"""
        a, b = lattice_bonds(4)
        self.assertEqual(len(a), 24)
        self.assertEqual((int(a[0]), int(b[0])), (0, 1))
        self.assertEqual((int(a[1]), int(b[1])), (0, 4))
        with self.assertRaises(PercolationError):
            lattice_bonds(1)

    def test_exhaustive_square(self):
        """The 2x2 lattice is a 4-cycle with known averages"""
        record = exhaustive_microcanonical(2)
        self.assertTrue(record.exact)
        self.assertEqual(record.M, 4)
        np.testing.assert_allclose(record.means["giant_fraction"], [0.25, 0.5, 2 / 3, 1.0, 1.0])
        np.testing.assert_allclose(record.means["avg_cluster_size"], [1.0, 4 / 3, 2.0, 4.0, 4.0])
        np.testing.assert_allclose(record.means["perfect_connectivity"], [0, 0, 0, 1, 1])

    def test_exhaustive_canonical(self):
        """Perfect connectivity of the 4-cycle is 4 p^3 (1 - p) + p^4"""
        record = exhaustive_microcanonical(2)
        p = np.array([0.2, 0.5, 0.9])
        curve = canonical_convolve(record, p)
        np.testing.assert_allclose(curve.values["perfect_connectivity"], 4 * p ** 3 * (1 - p) + p ** 4, atol=1e-12)

    def test_exhaustive_cap(self):
        """Lattices with more than 24 bonds are refused"""
        with self.assertRaises(PercolationError):
            exhaustive_microcanonical(5)

    def test_sweeps_match_enumeration(self):
        """Sampled averages on the 3x3 lattice agree with exact enumeration"""
        exact = exhaustive_microcanonical(3)
        sampled = accumulate_sweeps(3, 4000, seed=21)
        for name in ("giant_fraction", "avg_cluster_size"):
            diff = np.abs(sampled.means[name] - exact.means[name])
            self.assertTrue(np.all(diff <= 5 * sampled.stderrs[name] + 1e-9), name)
        # 0/1 indicator: the sampled stderr vanishes when every sweep agrees
        expected = exact.means["perfect_connectivity"]
        sigma = np.maximum(sampled.stderrs["perfect_connectivity"], np.sqrt(expected * (1 - expected) / 4000))
        diff = np.abs(sampled.means["perfect_connectivity"] - expected)
        self.assertTrue(np.all(diff <= 5 * sigma + 1e-9))
        self.assertEqual(float(expected[7]), 0.0)
        self.assertAlmostEqual(float(expected[8]), 192 / 495)

    def test_sweep_endpoints(self):
        """m = 0 is all singletons and m = M is one cluster"""
        record = accumulate_sweeps(4, 50, seed=1)
        self.assertAlmostEqual(record.means["giant_fraction"][0], 1 / 16)
        self.assertAlmostEqual(record.means["giant_fraction"][-1], 1.0)
        self.assertAlmostEqual(record.means["perfect_connectivity"][-1], 1.0)
        self.assertTrue(np.all(np.diff(record.means["giant_fraction"]) >= -1e-12))
        self.assertEqual(len(record.to_frame()), 25 * len(OBSERVABLES))

    def test_reproducible(self):
        """Same seed, same record; worker count does not matter"""
        first = accumulate_sweeps(4, 40, seed=99)
        second = accumulate_sweeps(4, 40, seed=99)
        parallel = accumulate_sweeps(4, 40, seed=99, n_jobs=2)
        for name in OBSERVABLES:
            np.testing.assert_array_equal(first.means[name], second.means[name])
            np.testing.assert_allclose(first.means[name], parallel.means[name], rtol=1e-12)

    def test_iterations_checked(self):
        """At least one sweep is required"""
        with self.assertRaises(PercolationError):
            accumulate_sweeps(3, 0, seed=0)


class TestCanonical(unittest.TestCase):
    """Test cases for binomial weights and canonical curves"""

    def test_binomial_weights_match_pmf(self):
        """Mode-anchored weights equal the binomial pmf"""
        for M, p in ((84, 0.3), (24, 0.77), (4, 0.5)):
            np.testing.assert_allclose(binomial_weights(M, p), binom.pmf(np.arange(M + 1), M, p), atol=1e-13)

    def test_binomial_weights_large(self):
        """Large M stays finite and normalized"""
        weights = binomial_weights(5000, 0.5)
        self.assertTrue(np.all(np.isfinite(weights)))
        self.assertAlmostEqual(weights.sum(), 1.0, places=12)

    def test_binomial_weights_endpoints(self):
        """p = 0 and p = 1 put all mass on one end"""
        self.assertEqual(binomial_weights(6, 0.0).tolist(), [1, 0, 0, 0, 0, 0, 0])
        self.assertEqual(binomial_weights(6, 1.0).tolist(), [0, 0, 0, 0, 0, 0, 1])
        np.testing.assert_allclose(binomial_weights(6, 0.4, m_range=[2, 3]), binom.pmf([2, 3], 6, 0.4))
        with self.assertRaises(PercolationError):
            binomial_weights(6, 1.5)

    def test_canonical_limits(self):
        """Q(0) is the empty lattice and Q(1) the full one"""
        record = accumulate_sweeps(5, 20, seed=4)
        curve = canonical_convolve(record, [0.0, 1.0])
        np.testing.assert_allclose(curve.values["giant_fraction"], [1 / 25, 1.0])
        np.testing.assert_allclose(curve.values["perfect_connectivity"], [0.0, 1.0])
        self.assertEqual(len(curve.to_frame()), 2 * len(OBSERVABLES))

    def test_monotone_in_p(self):
        """The giant fraction grows with the bond probability"""
        record = accumulate_sweeps(6, 100, seed=8)
        curve = canonical_convolve(record, np.linspace(0, 1, 21))
        self.assertTrue(np.all(np.diff(curve.values["giant_fraction"]) >= -1e-12))


class TestInhomogeneous(unittest.TestCase):
    """Test cases for direct sampling and the bounds"""

    def test_equal_probabilities_match_canonical(self):
        """Equal street probabilities reproduce the homogeneous curve"""
        record = accumulate_sweeps(4, 3000, seed=10)
        curve = canonical_convolve(record, [0.5])
        estimate = inhomogeneous_sample(np.full(24, 0.5), 3000, seed=11)
        for name in ("giant_fraction", "perfect_connectivity"):
            tolerance = 5 * (estimate.stderrs[name] + curve.stderrs[name][0]) + 1e-3
            self.assertLess(abs(estimate.means[name] - curve.values[name][0]), tolerance, name)

    def test_canonical_matches_direct_sampling(self):
        """On a 16x16 lattice both routes agree on every observable"""
        record = accumulate_sweeps(16, 1000, seed=40)
        p = [0.3, 0.5, 0.7]
        curve = canonical_convolve(record, p)
        for i, prob in enumerate(p):
            estimate = inhomogeneous_sample(np.full(480, prob), 1500, seed=41 + i)
            for name in OBSERVABLES:
                sigma = np.hypot(estimate.stderrs[name], curve.stderrs[name][i])
                diff = abs(estimate.means[name] - curve.values[name][i])
                self.assertLessEqual(diff, 4 * sigma + 1e-3, f"{name} at p={prob}")

    def test_extreme_probabilities(self):
        """All streets open or all closed"""
        full = inhomogeneous_sample(np.ones(12), 5, seed=0)
        empty = inhomogeneous_sample(np.zeros(12), 5, seed=0)
        self.assertEqual(full.means["perfect_connectivity"], 1.0)
        self.assertAlmostEqual(empty.means["giant_fraction"], 1 / 9)

    def test_invalid_inputs(self):
        """Non-lattice lengths and out-of-range probabilities are rejected"""
        with self.assertRaises(PercolationError):
            inhomogeneous_sample(np.full(10, 0.5), 5, seed=0)
        with self.assertRaises(PercolationError):
            inhomogeneous_sample(np.full(12, 1.2), 5, seed=0)

    def test_bounds_bracket_exact(self):
        """Homogeneous curves at the extreme probabilities bracket the direct estimate"""
        rng = np.random.default_rng(2)
        probs = rng.uniform(0.3, 0.8, size=40)
        record = accumulate_sweeps(5, 2000, seed=12)
        lower, upper = bound_curves(probs, record)
        estimate = inhomogeneous_sample(probs, 2000, seed=13)
        for name in ("giant_fraction", "perfect_connectivity"):
            self.assertLessEqual(lower.values[name][0], upper.values[name][0])
            slack = 5 * (estimate.stderrs[name] + lower.stderrs[name][0] + upper.stderrs[name][0])
            self.assertGreaterEqual(estimate.means[name], lower.values[name][0] - slack)
            self.assertLessEqual(estimate.means[name], upper.values[name][0] + slack)


class TestThreshold(unittest.TestCase):
    """Test cases for threshold and width estimates"""

    def setUp(self):
        """Set up test fixtures"""
        p = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        values = {"giant_fraction": np.array([0.0, 0.05, 0.4, 0.8, 1.0])}
        self.curve = PercolationCurve(side=3, p=p, values=values, stderrs=values)

    def test_interpolated_crossing(self):
        """Linear interpolation between the bracketing grid points"""
        self.assertAlmostEqual(estimate_threshold(self.curve), 0.5 + 0.25 * 0.25)

    def test_width(self):
        """Width between the 0.1 and 0.9 crossings"""
        low = 0.25 + 0.25 * (0.05 / 0.35)
        high = 0.75 + 0.25 * 0.5
        self.assertAlmostEqual(transition_width(self.curve), high - low)

    def test_no_crossing(self):
        """A level the curve never reaches raises"""
        with self.assertRaises(ThresholdNotFoundError):
            estimate_threshold(self.curve, level=1.5)

    @unittest.skipUnless(RUN_SLOW, "set VANET_RUN_SLOW=1 to run large lattices")
    def test_large_lattice_threshold(self):
        """Side 64: the giant fraction crosses one half close to p = 1/2, more sharply than side 16"""
        grid = np.linspace(0.0, 1.0, 401)
        large = canonical_convolve(accumulate_sweeps(64, iterations=200, seed=2024), grid)
        small = canonical_convolve(accumulate_sweeps(16, iterations=200, seed=2024), grid)
        self.assertTrue(0.47 <= estimate_threshold(large) <= 0.53)
        self.assertLess(transition_width(large), transition_width(small))


if __name__ == '__main__':
    unittest.main(verbosity=2)
