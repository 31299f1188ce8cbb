#!/usr/bin/env python3
"""
Command line runner for the VANET connectivity scenarios

Each scenario chains the traffic solver, the street connectivity formulas and
the percolation engine (optionally the simulator) and writes plot-ready CSV
rows plus a reproducibility manifest.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy
import yaml
from dotenv import load_dotenv

from . import __version__
from .core_model import (
    RunConfig,
    apply_overrides,
    build_city,
    draw_traffic_weights,
    load_config,
    validate_config,
)
from .exceptions import ConfigValidationError, VanetConnectivityError, ScenarioError
from .logging_utils import setup_logging
from .percolation_engine import (
    OBSERVABLES,
    PRIMARY_OBSERVABLES,
    MicrocanonicalRecord,
    accumulate_sweeps,
    bound_curves,
    canonical_convolve,
    estimate_threshold,
    exhaustive_microcanonical,
    inhomogeneous_sample,
)
from .street_connectivity import connectivity_frame, monte_carlo_street, street_probabilities
from .traffic_solver import solve_city
from .vanet_simulator import run_simulation

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["scenario", "side", "sweep_var", "sweep_value", "observable", "mean", "stderr"]
FLOAT_FORMAT = "%.10g"
LARGE_SIDE = 32
LARGE_SIDE_ITERATIONS = 200

SCENARIOS = {
    "scenario1": "edge_prob_sweep",
    "scenario2": "entrance_rate_sweep",
    "scenario3": "range_sweep",
    "scenario4": "asymmetric_bounds",
    "scenario5": "dual_range",
}

DEFAULT_GRIDS = {
    "edge_prob_sweep": "0:1:0.02",
    "entrance_rate_sweep": "0:0.3:0.02",
    "range_sweep": "50:500:25",
    "asymmetric_bounds": "0:0.3:0.02",
    "dual_range": "0:0.3:0.02",
}


@dataclass
class ScenarioSpec:
    """What to run, over which grid and lattice sides, and where to write it"""
    scenario: str
    grid: List[float]
    sides: List[int]
    output: str
    seed: int
    overrides: Dict[str, Any] = field(default_factory=dict)
    iterations: Optional[int] = None
    n_jobs: int = 1
    rates: List[float] = field(default_factory=lambda: [0.1, 0.2, 0.3])
    p_types: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    simulate: bool = False
    progress: bool = False

    def validate(self) -> List[str]:
        violations = []
        if self.scenario not in SCENARIOS.values():
            violations.append(f"scenario: unknown scenario '{self.scenario}'")
        if len(self.grid) < 2:
            violations.append(f"grid: at least 2 sweep points required, got {len(self.grid)}")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            violations.append("grid: sweep values must be strictly increasing")
        if not self.sides or any(side < 2 for side in self.sides):
            violations.append(f"sides: every lattice side must be >= 2, got {self.sides}")
        if self.iterations is not None and self.iterations < 1:
            violations.append(f"iterations: must be >= 1, got {self.iterations}")
        return violations


def parse_grid(text: str) -> List[float]:
    """'start:stop:step' (stop included) or a comma separated list"""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigValidationError([f"grid '{text}': expected start:stop:step"])
        start, stop, step = (float(part) for part in parts)
        if step <= 0:
            raise ConfigValidationError([f"grid '{text}': step must be > 0"])
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(value) for value in text.split(",") if value.strip()]


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """--set key=value pairs; values are parsed as YAML scalars or lists"""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigValidationError([f"--set '{pair}': expected key=value"])
        key, value = pair.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def _side_seed(seed: int, side: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, side, salt]).generate_state(1)[0])


def _iterations_for(spec: ScenarioSpec, config: RunConfig, side: int) -> int:
    if spec.iterations is not None:
        return spec.iterations
    if side > LARGE_SIDE:
        return min(config.percolation.iterations, LARGE_SIDE_ITERATIONS)
    return config.percolation.iterations


def _observable_names(config: RunConfig) -> Sequence[str]:
    if config.percolation.avg_cluster_definition == "susceptibility":
        return OBSERVABLES
    return PRIMARY_OBSERVABLES


def _row(scenario: str, side: int, sweep_var: str, sweep_value: float, observable: str,
         mean: float, stderr: float) -> Dict[str, Any]:
    return {
        "scenario": scenario,
        "side": side,
        "sweep_var": sweep_var,
        "sweep_value": float(sweep_value),
        "observable": observable,
        "mean": float(mean),
        "stderr": float(stderr),
    }


class ScenarioRunner:
    """Runs one ScenarioSpec against a base configuration"""

    def __init__(self, spec: ScenarioSpec, config: RunConfig):
        self.spec = spec
        self.config = apply_overrides(config, spec.overrides) if spec.overrides else config
        self.observables = _observable_names(self.config)
        self._records: Dict[int, MicrocanonicalRecord] = {}

    def record(self, side: int) -> MicrocanonicalRecord:
        """Microcanonical record of one lattice side, computed once per run"""
        if side not in self._records:
            iterations = _iterations_for(self.spec, self.config, side)
            logger.info(f"Running {iterations} sweeps on a {side}x{side} lattice")
            self._records[side] = accumulate_sweeps(
                side, iterations, _side_seed(self.spec.seed, side),
                n_jobs=self.spec.n_jobs, progress=self.spec.progress,
            )
        return self._records[side]

    def city_config(self, side: int, **overrides) -> RunConfig:
        values = {"city.grid_side": side}
        values.update({key.replace("__", "."): value for key, value in overrides.items()})
        return apply_overrides(self.config, values)

    def street_probs(self, config: RunConfig) -> np.ndarray:
        topology = build_city(config)
        solution = solve_city(topology, config)
        return np.array([record.p_open for record in street_probabilities(topology, solution, config)])

    def canonical_rows(self, side: int, sweep_var: str, sweep_value: float, p: float,
                       suffix: str = "") -> List[Dict[str, Any]]:
        curve = canonical_convolve(self.record(side), [p])
        return [
            _row(self.spec.scenario, side, sweep_var, sweep_value, f"{name}{suffix}",
                 curve.values[name][0], curve.stderrs[name][0])
            for name in self.observables
        ]

    def run(self) -> List[Dict[str, Any]]:
        handler = getattr(self, f"_run_{self.spec.scenario}")
        return handler()

    def _run_edge_prob_sweep(self) -> List[Dict[str, Any]]:
        rows = []
        for side in self.spec.sides:
            curve = canonical_convolve(self.record(side), self.spec.grid)
            for i, p in enumerate(curve.p):
                for name in self.observables:
                    rows.append(_row(self.spec.scenario, side, "p", p, name,
                                     curve.values[name][i], curve.stderrs[name][i]))
            try:
                logger.info(f"Side {side}: giant-fraction 0.5-crossing at p = {estimate_threshold(curve):.4f}")
            except VanetConnectivityError as e:
                logger.warning(f"Side {side}: {e}")
        return rows

    def _run_entrance_rate_sweep(self) -> List[Dict[str, Any]]:
        rows = []
        scenario = self.spec.scenario
        for side in self.spec.sides:
            for rate in self.spec.grid:
                config = self.city_config(side, traffic__entrance_rate=rate)
                probs = self.street_probs(config)
                mean_p = float(probs.mean())
                rows += self.canonical_rows(side, "lambda", rate, mean_p)
                rows.append(_row(scenario, side, "lambda", rate, "street_probability", mean_p, 0.0))
                rows.append(_row(scenario, side, "lambda", rate, "street_probability_min", probs.min(), 0.0))
                rows.append(_row(scenario, side, "lambda", rate, "street_probability_max", probs.max(), 0.0))

                estimate = inhomogeneous_sample(probs, _iterations_for(self.spec, config, side),
                                                _side_seed(self.spec.seed, side, 1), n_jobs=self.spec.n_jobs)
                for name in self.observables:
                    rows.append(_row(scenario, side, "lambda", rate, f"{name}_inhomogeneous",
                                     estimate.means[name], estimate.stderrs[name]))

                if self.spec.simulate:
                    result = run_simulation(replace(config, seed=_side_seed(self.spec.seed, side, 2)),
                                            progress=self.spec.progress)
                    for name, (mean, stderr) in result.aggregates.items():
                        rows.append(_row(scenario, side, "lambda", rate, f"sim_{name}", mean, stderr))
                    frequency, frequency_err = result.street_open_frequency()
                    low, high = int(np.argmin(frequency)), int(np.argmax(frequency))
                    rows.append(_row(scenario, side, "lambda", rate, "sim_street_open_frequency_min",
                                     frequency[low], frequency_err[low]))
                    rows.append(_row(scenario, side, "lambda", rate, "sim_street_open_frequency_max",
                                     frequency[high], frequency_err[high]))
        return rows

    def _run_range_sweep(self) -> List[Dict[str, Any]]:
        rows = []
        for side in self.spec.sides:
            for rate in self.spec.rates:
                base = self.city_config(side, traffic__entrance_rate=rate, transmission__model="single")
                topology = build_city(base)
                solution = solve_city(topology, base)
                for range_m in self.spec.grid:
                    config = apply_overrides(base, {"transmission.range_m": range_m})
                    probs = np.array([r.p_open for r in street_probabilities(topology, solution, config)])
                    rows += self.canonical_rows(side, "R", range_m, float(probs.mean()), f"|lambda={rate:g}")
        return rows

    def _run_asymmetric_bounds(self) -> List[Dict[str, Any]]:
        rows = []
        scenario = self.spec.scenario
        for side in self.spec.sides:
            weighted = draw_traffic_weights(self.city_config(side), 1.0, 2.0, seed=_side_seed(self.spec.seed, side, 3))
            record = self.record(side)
            for rate in self.spec.grid:
                config = apply_overrides(weighted, {"traffic.entrance_rate": rate})
                probs = self.street_probs(config)
                lower, upper = bound_curves(probs, record)
                exact = inhomogeneous_sample(probs, _iterations_for(self.spec, config, side),
                                             _side_seed(self.spec.seed, side, 1), n_jobs=self.spec.n_jobs)
                for name in self.observables:
                    low, high = lower.values[name][0], upper.values[name][0]
                    mean, stderr = exact.means[name], exact.stderrs[name]
                    slack = 3.0 * (stderr + lower.stderrs[name][0] + upper.stderrs[name][0])
                    if not low - slack <= mean <= high + slack:
                        logger.warning(f"lambda={rate:g}, {name}: estimate {mean:.4f} outside [{low:.4f}, {high:.4f}]")
                    rows.append(_row(scenario, side, "lambda", rate, f"{name}_lower", low, lower.stderrs[name][0]))
                    rows.append(_row(scenario, side, "lambda", rate, f"{name}_exact", mean, stderr))
                    rows.append(_row(scenario, side, "lambda", rate, f"{name}_upper", high, upper.stderrs[name][0]))
        return rows

    def _run_dual_range(self) -> List[Dict[str, Any]]:
        rows = []
        for side in self.spec.sides:
            for rate in self.spec.grid:
                base = self.city_config(side, traffic__entrance_rate=rate, transmission__model="dual")
                topology = build_city(base)
                solution = solve_city(topology, base)
                for p_type1 in self.spec.p_types:
                    config = apply_overrides(base, {"transmission.p_type1": p_type1})
                    probs = np.array([r.p_open for r in street_probabilities(topology, solution, config)])
                    rows += self.canonical_rows(side, "lambda", rate, float(probs.mean()), f"|p={p_type1:g}")
        return rows


def run_scenario(spec: ScenarioSpec, config: RunConfig) -> List[str]:
    """
    Run a scenario and write its CSV and manifest

    Args:
        spec: Scenario description
        config: Base run configuration

    Returns:
        Paths written
    """
    violations = spec.validate() + validate_config(config)
    if violations:
        raise ConfigValidationError(violations)
    try:
        rows = ScenarioRunner(spec, config).run()
    except VanetConnectivityError as e:
        raise ScenarioError(spec.scenario, e) from e

    emit_csv(rows, spec.output)
    manifest = write_manifest(spec, config)
    logger.info(f"Scenario {spec.scenario}: {len(rows)} rows written to {spec.output}")
    return [spec.output, manifest]


def emit_csv(rows: List[Dict[str, Any]], path: str) -> str:
    """
    Write result rows as UTF-8 CSV in (side, sweep_value, observable) order

    Args:
        rows: Result rows with the CSV_COLUMNS keys
        path: Output file

    Returns:
        The path written
    """
    frame = pd.DataFrame(rows, columns=CSV_COLUMNS)
    if not frame.empty:
        frame = frame.sort_values(["side", "sweep_value", "observable"], kind="mergesort")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")
    return path


def write_manifest(spec: ScenarioSpec, config: RunConfig) -> str:
    """Reproducibility manifest next to the CSV (no wall-clock fields)"""
    path = f"{spec.output}.manifest.json"
    manifest = {
        "scenario": spec.scenario,
        "seed": spec.seed,
        "iterations": {str(side): _iterations_for(spec, config, side) for side in spec.sides},
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "spec": asdict(spec),
        "versions": {
            "vanet_connectivity": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="Configuration YAML (default: $VANET_CONFIG or built-in defaults)")
    parser.add_argument("--seed", type=int, help="Master RNG seed (overrides config)")
    parser.add_argument("--out", type=str, help="Output CSV path")
    parser.add_argument("--iterations", type=int, help="Percolation sweeps / samples")
    parser.add_argument("--n-jobs", type=int, help="Parallel workers (joblib; default: percolation.n_jobs)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration field, e.g. --set traffic.entrance_rate=0.2")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument("--log-file", type=str, help="Also write logs to this file")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(
        prog="vanet-connectivity",
        description="Connectivity of grid-city vehicular ad hoc networks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Percolation curves vs edge probability for three lattice sizes
  vanet-connectivity scenario1 --sides 4,7,16 --out results/scenario1.csv

  # Curves vs entrance rate with the simulator overlay
  vanet-connectivity scenario2 --simulate --out results/scenario2.csv

  # Two transmission ranges
  vanet-connectivity scenario5 --config config/dual_range.yaml --out results/scenario5.csv

  # Check a configuration file
  vanet-connectivity validate-config --config config/asymmetric_city.yaml
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for verb, scenario in SCENARIOS.items():
        sub = subparsers.add_parser(verb, help=f"Run the {scenario} scenario")
        _add_common_arguments(sub)
        sub.add_argument("--sides", type=str, help="Comma separated lattice sides")
        sub.add_argument("--grid", type=str, default=DEFAULT_GRIDS[scenario],
                         help="Sweep grid as start:stop:step or a comma list")
        if scenario == "entrance_rate_sweep":
            sub.add_argument("--simulate", action="store_true", help="Add simulator estimates")
        if scenario == "range_sweep":
            sub.add_argument("--rates", type=str, default="0.1,0.2,0.3", help="Entrance rates")
        if scenario == "dual_range":
            sub.add_argument("--p-types", type=str, default="0,0.25,0.5,0.75,1",
                             help="Probabilities of the short range")

    sub = subparsers.add_parser("validate-config", help="Check a configuration and list violations")
    _add_common_arguments(sub)

    sub = subparsers.add_parser("street-prob", help="Per-street connectivity of the configured city")
    _add_common_arguments(sub)
    sub.add_argument("--monte-carlo", type=int, default=0, metavar="TRIALS",
                     help="Add a Monte-Carlo estimate per street")
    sub.add_argument("--traffic-csv", type=str, help="Also write the traffic solution")

    sub = subparsers.add_parser("percolate", help="Microcanonical sweeps and canonical curves")
    _add_common_arguments(sub)
    sub.add_argument("--sides", type=str, help="Comma separated lattice sides")
    sub.add_argument("--grid", type=str, default=DEFAULT_GRIDS["edge_prob_sweep"], help="p grid")
    sub.add_argument("--microcanonical", type=str, help="Also write the per-m averages")
    sub.add_argument("--exhaustive", action="store_true", help="Exact enumeration (at most 24 bonds)")

    sub = subparsers.add_parser("simulate", help="Run the vehicle simulator on the configured city")
    _add_common_arguments(sub)
    sub.add_argument("--time-series", type=str, help="Also write (time, street_id, open) rows")

    return parser.parse_args(argv)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file, then --set overrides, then --seed (CLI wins)"""
    config_path = args.config or os.getenv("VANET_CONFIG")
    config = load_config(config_path) if config_path else RunConfig()
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return apply_overrides(config, overrides) if overrides else config


def _sides(args: argparse.Namespace, config: RunConfig, default: Sequence[int]) -> List[int]:
    if getattr(args, "sides", None):
        return [int(value) for value in args.sides.split(",") if value.strip()]
    return list(default)


def _default_output(name: str) -> str:
    return os.path.join("results", f"{name}.csv")


def _run_command(args: argparse.Namespace, config: RunConfig) -> int:
    progress = not args.no_progress

    if args.command == "validate-config":
        violations = validate_config(config)
        if violations:
            for violation in violations:
                logger.error(violation)
            return 1
        logger.info("Configuration is valid")
        return 0

    if args.command in SCENARIOS:
        scenario = SCENARIOS[args.command]
        default_sides = [4, 7, 16] if scenario == "edge_prob_sweep" else [config.city.grid_side]
        spec = ScenarioSpec(
            scenario=scenario,
            grid=parse_grid(args.grid),
            sides=_sides(args, config, default_sides),
            output=args.out or _default_output(args.command),
            seed=config.seed,
            iterations=args.iterations,
            n_jobs=args.n_jobs or config.percolation.n_jobs,
            simulate=getattr(args, "simulate", False),
            progress=progress,
        )
        if scenario == "range_sweep":
            spec.rates = parse_grid(args.rates)
        if scenario == "dual_range":
            spec.p_types = parse_grid(args.p_types)
        for path in run_scenario(spec, config):
            logger.info(f"Wrote {path}")
        return 0

    if args.command == "street-prob":
        topology = build_city(config)
        solution = solve_city(topology, config)
        records = street_probabilities(topology, solution, config)
        frame = connectivity_frame(records)
        if args.monte_carlo:
            tx = config.transmission
            estimates = [
                monte_carlo_street(r.inputs.rho1, r.inputs.rho2, r.inputs.rho3, config.geometry.D,
                                   tx.x1 if tx.is_dual else tx.range_m, tx.x2 if tx.is_dual else None,
                                   tx.p_type1 if tx.is_dual else 1.0, tx.link_rule,
                                   trials=args.monte_carlo, seed=_side_seed(config.seed, r.street_id))
                for r in records
            ]
            frame["mc_p_open"] = [estimate for estimate, _ in estimates]
            frame["mc_stderr"] = [stderr for _, stderr in estimates]
        output = args.out or _default_output("street_prob")
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        frame.to_csv(output, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        if args.traffic_csv:
            solution.to_csv(args.traffic_csv)
        logger.info(f"Mean street probability {frame['p_open'].mean():.4f}; wrote {output}")
        return 0

    if args.command == "percolate":
        grid = parse_grid(args.grid)
        rows = []
        for side in _sides(args, config, [config.city.grid_side]):
            if args.exhaustive:
                record = exhaustive_microcanonical(side)
            else:
                iterations = args.iterations or (config.percolation.iterations if side <= LARGE_SIDE
                                                 else min(config.percolation.iterations, LARGE_SIDE_ITERATIONS))
                record = accumulate_sweeps(side, iterations, _side_seed(config.seed, side),
                                           n_jobs=args.n_jobs or config.percolation.n_jobs, progress=progress)
            curve = canonical_convolve(record, grid)
            for i, p in enumerate(curve.p):
                for name in _observable_names(config):
                    rows.append(_row("percolate", side, "p", p, name, curve.values[name][i], curve.stderrs[name][i]))
            if args.microcanonical:
                base, ext = os.path.splitext(args.microcanonical)
                record.to_frame().to_csv(f"{base}_side{side}{ext or '.csv'}", index=False,
                                         float_format=FLOAT_FORMAT, lineterminator="\n")
        emit_csv(rows, args.out or _default_output("percolate"))
        return 0

    if args.command == "simulate":
        result = run_simulation(config, progress=progress)
        output = args.out or _default_output("simulation")
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        result.aggregate_frame().to_csv(output, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        if args.time_series:
            result.time_series_frame().to_csv(args.time_series, index=False, float_format=FLOAT_FORMAT,
                                              lineterminator="\n")
        return 0

    raise ConfigValidationError([f"unknown command '{args.command}'"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function"""
    load_dotenv()
    args = parse_arguments(argv)

    try:
        config = resolve_config(args)
    except (VanetConnectivityError, OSError, yaml.YAMLError) as e:
        setup_logging("DEBUG" if args.debug else "INFO", args.log_file)
        logger.error(f"Error loading configuration: {e}")
        return 1

    level = "DEBUG" if args.debug else (os.getenv("VANET_LOG_LEVEL") or config.logging.level)
    setup_logging(level, args.log_file or config.logging.log_file)

    try:
        return _run_command(args, config)
    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        return 130
    except (VanetConnectivityError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        if args.debug:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
