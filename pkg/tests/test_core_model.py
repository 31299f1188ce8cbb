#!/usr/bin/env python3
"""
Unit tests for the city model and run configuration
"""

import math
import os
import sys
import tempfile
import unittest

import yaml

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from vanet_connectivity.core_model import (
    RunConfig,
    Segment,
    SpeedClass,
    TurnSplit,
    apply_overrides,
    build_city,
    build_corridor,
    draw_traffic_weights,
    dump_config,
    lattice_edges,
    load_config,
    turn_distribution,
    validate_config,
)
from vanet_connectivity.exceptions import ConfigValidationError, TopologyError


class TestConfiguration(unittest.TestCase):
    """Test cases for RunConfig loading, overrides and validation"""

    def setUp(self):
        """Set up test fixtures"""
        self.config = RunConfig()

    def test_defaults_are_valid(self):
        """The built-in parameter table passes validation"""
        self.assertEqual(validate_config(self.config), [])
        self.assertEqual(self.config.geometry.D, 1600.0)
        self.assertEqual(self.config.geometry.total_length, 2000.0)
        self.assertEqual(len(self.config.speed_classes.middle), 3)

    def test_shipped_config_files_are_valid(self):
        """Every YAML under config/ loads and validates"""
        config_dir = os.path.join(os.path.dirname(__file__), '..', 'config')
        for name in ("default_config.yaml", "asymmetric_city.yaml", "dual_range.yaml"):
            config = load_config(os.path.join(config_dir, name))
            self.assertEqual(validate_config(config), [], name)

    def test_default_yaml_matches_builtin_defaults(self):
        """default_config.yaml spells out the built-in defaults"""
        config_dir = os.path.join(os.path.dirname(__file__), '..', 'config')
        config = load_config(os.path.join(config_dir, "default_config.yaml"))
        self.assertEqual(config.config_hash(), RunConfig().config_hash())

    def test_load_partial_yaml(self):
        """Missing keys take their defaults"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "partial.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"city": {"grid_side": 4}, "traffic": {"entrance_rate": 0.2}}, f)
            config = load_config(path)
        self.assertEqual(config.city.grid_side, 4)
        self.assertAlmostEqual(config.traffic.entrance_rate, 0.2)
        self.assertEqual(config.transmission.range_m, 200.0)

    def test_missing_config_file(self):
        """A missing file raises FileNotFoundError"""
        with self.assertRaises(FileNotFoundError):
            load_config("/nonexistent/vanet.yaml")

    def test_dump_and_reload(self):
        """A dumped configuration loads back with the same hash"""
        config = apply_overrides(self.config, {
            "transmission.model": "dual",
            "traffic.entrance_sides": ["west"],
            "turns.overrides": {"4": {"straight": 0.6, "left": 0.2, "right": 0.2}},
        })
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "dumped.yaml")
            dump_config(config, path)
            reloaded = load_config(path)
        self.assertEqual(reloaded.config_hash(), config.config_hash())
        self.assertAlmostEqual(reloaded.turns.split_at(4).straight, 0.6)

    def test_apply_overrides(self):
        """Dotted overrides return a modified copy"""
        updated = apply_overrides(self.config, {"traffic.entrance_rate": 0.25, "seed": 7})
        self.assertAlmostEqual(updated.traffic.entrance_rate, 0.25)
        self.assertEqual(updated.seed, 7)
        self.assertAlmostEqual(self.config.traffic.entrance_rate, 0.1)

    def test_unknown_override_key(self):
        """Unknown keys are rejected"""
        with self.assertRaises(ConfigValidationError):
            apply_overrides(self.config, {"traffic.nonexistent": 1})

    def test_config_hash(self):
        """Equal configurations hash equally; any change alters the hash"""
        self.assertEqual(self.config.config_hash(), RunConfig().config_hash())
        changed = apply_overrides(self.config, {"seed": 1})
        self.assertNotEqual(self.config.config_hash(), changed.config_hash())
        self.assertEqual(len(self.config.config_hash()), 64)

    def test_turn_split_must_sum_to_one(self):
        """Turn probabilities summing to 0.95 are reported"""
        config = apply_overrides(self.config, {"turns.straight": 0.45})
        violations = validate_config(config)
        self.assertTrue(any(v.startswith("turns (default at every intersection)") for v in violations))
        with self.assertRaises(ConfigValidationError):
            build_city(config)

    def test_turn_override_names_intersection(self):
        """A bad per-intersection split names the intersection"""
        config = apply_overrides(self.config, {"turns.overrides": {"12": {"straight": 0.5, "left": 0.3, "right": 0.3}}})
        violations = validate_config(config)
        self.assertTrue(any("intersection 12" in v for v in violations))

    def test_dual_range_order(self):
        """x1 must be shorter than x2"""
        config = apply_overrides(self.config, {"transmission.model": "dual", "transmission.x1": 400,
                                               "transmission.x2": 200})
        self.assertIn("transmission: x1 < x2 required", validate_config(config))

    def test_class_transition_rows(self):
        """Class transition rows must be stochastic"""
        config = apply_overrides(self.config, {"class_transitions.end_to_front": [[0.6, 0.6], [0.0, 1.0]]})
        violations = validate_config(config)
        self.assertTrue(any(v.startswith("class_transitions.end_to_front[0]") for v in violations))

    def test_grid_side_and_weights(self):
        """Tiny grids and mismatched weight lists are reported"""
        self.assertTrue(validate_config(apply_overrides(self.config, {"city.grid_side": 1})))
        config = apply_overrides(self.config, {"city.grid_side": 2, "city.traffic_weights": [1.0, 1.0, 1.0]})
        self.assertTrue(any("expected 4 weights" in v for v in validate_config(config)))

    def test_draw_traffic_weights(self):
        """Weights fall in [1, 2] and are reproducible per seed"""
        first = draw_traffic_weights(self.config, seed=3)
        second = draw_traffic_weights(self.config, seed=3)
        weights = first.city.traffic_weights
        self.assertEqual(len(weights), 49)
        self.assertTrue(all(1.0 <= w <= 2.0 for w in weights))
        self.assertEqual(weights, second.city.traffic_weights)
        self.assertEqual(validate_config(first), [])


class TestSpeedClass(unittest.TestCase):
    """Test cases for SpeedClass"""

    def test_mean_inverse_speed_uniform(self):
        """E[1/V] of a uniform speed is ln(b/a)/(b-a)"""
        speed_class = SpeedClass("low", 3.0, 14.0)
        self.assertAlmostEqual(speed_class.mean_inverse_speed(), math.log(14.0 / 3.0) / 11.0, places=12)

    def test_constant_speed(self):
        """A degenerate class has E[1/V] = 1/v"""
        self.assertAlmostEqual(SpeedClass("fixed", 15.0, 15.0).mean_inverse_speed(), 1.0 / 15.0)

    def test_zero_speed_rejected(self):
        """v_min = 0 has no finite E[1/V]"""
        with self.assertRaises(ConfigValidationError):
            SpeedClass("stopped", 0.0, 3.0).mean_inverse_speed()


class TestCityTopology(unittest.TestCase):
    """Test cases for the lattice city"""

    def setUp(self):
        """Set up test fixtures"""
        self.config = apply_overrides(RunConfig(), {"city.grid_side": 3})
        self.city = build_city(self.config)

    def test_counts(self):
        """A 7x7 city has 84 two-way streets, 504 queue nodes and 28 entrances"""
        city = build_city(RunConfig())
        self.assertEqual(len(city.streets), 84)
        self.assertEqual(city.num_queue_nodes, 504)
        self.assertEqual(len(city.entrances), 28)
        self.assertEqual(city.grid_side, 7)

    def test_lattice_edge_order(self):
        """Row-major, eastward street before southward street"""
        self.assertEqual(
            lattice_edges(2, 2),
            [(0, 1, "horizontal"), (0, 2, "vertical"), (1, 3, "vertical"), (2, 3, "horizontal")],
        )

    def test_node_ids(self):
        """Street s owns queue nodes 6s .. 6s+5"""
        street = self.city.street(5)
        self.assertEqual(street.node_ids, ((30, 31, 32), (33, 34, 35)))

    def test_unknown_street(self):
        """Unknown street ids raise TopologyError"""
        with self.assertRaises(TopologyError):
            self.city.street(999)

    def test_leaving_and_boundary(self):
        """The centre of a 3x3 city has four neighbours; corners are boundary"""
        for side in ("north", "east", "south", "west"):
            self.assertIsNotNone(self.city.leaving(4, side))
        self.assertFalse(self.city.is_boundary(4))
        self.assertTrue(self.city.is_boundary(0))
        self.assertIsNone(self.city.leaving(0, "north"))

    def test_entrances_feed_inward(self):
        """Every boundary gate feeds the street pointing into the city"""
        self.assertEqual(len(self.city.entrances), 12)
        for entrance in self.city.entrances:
            street = self.city.street(entrance.street_id)
            origin = self.city.intersections[street.origin(entrance.direction)]
            self.assertTrue(self.city.is_boundary(origin.id))
            self.assertAlmostEqual(entrance.rate, 0.1)

    def test_entrance_sides_filter(self):
        """Only the configured sides receive entrances"""
        config = apply_overrides(self.config, {"traffic.entrance_sides": ["west"]})
        city = build_city(config)
        self.assertEqual(len(city.entrances), 3)
        self.assertTrue(all(e.side == "west" for e in city.entrances))

    def test_corridor(self):
        """A one-way corridor has a single entrance at its west end"""
        corridor = build_corridor(self.config, n_streets=2)
        self.assertEqual(len(corridor.streets), 2)
        self.assertEqual(corridor.num_queue_nodes, 6)
        self.assertEqual([(e.street_id, e.direction) for e in corridor.entrances], [(0, 0)])
        with self.assertRaises(TopologyError):
            corridor.grid_side


class TestTurnDistribution(unittest.TestCase):
    """Test cases for routing at intersections"""

    def setUp(self):
        """Set up test fixtures"""
        self.config = apply_overrides(RunConfig(), {"city.grid_side": 3})
        self.city = build_city(self.config)

    def test_rows_sum_to_one(self):
        """Every outgoing distribution is stochastic"""
        for street in self.city.streets:
            for direction in street.directions:
                moves = turn_distribution(self.city, street.id, direction, self.config)
                self.assertAlmostEqual(sum(p for _, p in moves), 1.0, places=12)
                self.assertTrue(all(p >= 0 for _, p in moves))

    def test_interior_split(self):
        """Heading east into the centre: straight east, left north, right south"""
        street_id, direction = self.city.leaving(3, "east")
        moves = dict(turn_distribution(self.city, street_id, direction, self.config))
        self.assertAlmostEqual(moves[self.city.leaving(4, "east")], 0.5)
        self.assertAlmostEqual(moves[self.city.leaving(4, "north")], 0.25)
        self.assertAlmostEqual(moves[self.city.leaving(4, "south")], 0.25)
        self.assertNotIn(None, moves)

    def test_boundary_exit(self):
        """A missing left turn at the north edge leaves the city"""
        street_id, direction = self.city.leaving(0, "east")
        moves = dict(turn_distribution(self.city, street_id, direction, self.config))
        self.assertAlmostEqual(moves[None], 0.25)
        self.assertAlmostEqual(moves[self.city.leaving(1, "east")], 0.5)
        self.assertAlmostEqual(moves[self.city.leaving(1, "south")], 0.25)

    def test_fixed_exit_probability(self):
        """exit_probability fixes the outside mass; the rest keeps its ratios"""
        config = apply_overrides(self.config, {"turns.exit_probability": 0.4})
        street_id, direction = self.city.leaving(0, "east")
        moves = dict(turn_distribution(self.city, street_id, direction, config))
        self.assertAlmostEqual(moves[None], 0.4)
        self.assertAlmostEqual(moves[self.city.leaving(1, "east")], 0.4)
        self.assertAlmostEqual(moves[self.city.leaving(1, "south")], 0.2)

    def test_traffic_weights_bias_turns(self):
        """Heavier destination intersections attract more turning traffic"""
        weights = [1.0] * 9
        weights[1] = 2.0
        config = apply_overrides(self.config, {"city.traffic_weights": weights})
        city = build_city(config)
        street_id, direction = city.leaving(3, "east")
        moves = dict(turn_distribution(city, street_id, direction, config))
        north = moves[city.leaving(4, "north")]
        south = moves[city.leaving(4, "south")]
        self.assertAlmostEqual(north / south, 2.0)

    def test_per_intersection_override(self):
        """An override replaces the split at one intersection only"""
        config = apply_overrides(self.config, {"turns.overrides": {"4": {"straight": 1.0, "left": 0.0, "right": 0.0}}})
        self.assertEqual(config.turns.split_at(4), TurnSplit(1.0, 0.0, 0.0))
        street_id, direction = self.city.leaving(3, "east")
        moves = dict(turn_distribution(self.city, street_id, direction, config))
        self.assertAlmostEqual(moves[self.city.leaving(4, "east")], 1.0)

    def test_segment_enum(self):
        """Segments compare equal to their names"""
        self.assertEqual(Segment("middle"), Segment.MIDDLE)
        self.assertEqual(self.config.geometry.start(Segment.END), 1800.0)


if __name__ == '__main__':
    unittest.main(verbosity=2)
