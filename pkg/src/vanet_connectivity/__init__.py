"""
VANET Connectivity

Connectivity of vehicular ad hoc networks in grid cities: queueing-network
traffic densities, per-street connectivity probabilities and bond percolation
over the street lattice.
"""

__version__ = "1.0.0"

from .core_model import RunConfig, build_city, load_config, validate_config
from .traffic_solver import TrafficSolution, solve_city
from .street_connectivity import street_probabilities
from .percolation_engine import accumulate_sweeps, canonical_convolve
from .vanet_simulator import run_simulation

__all__ = [
    "__version__",
    "RunConfig",
    "build_city",
    "load_config",
    "validate_config",
    "TrafficSolution",
    "solve_city",
    "street_probabilities",
    "accumulate_sweeps",
    "canonical_convolve",
    "run_simulation",
]
