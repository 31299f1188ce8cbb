"""
Exception hierarchy for the VANET connectivity toolkit.

Library code raises these; only the command line runner turns them into
log lines and exit codes.
"""

from typing import List, Optional


class VanetConnectivityError(Exception):
    """Base class for every error raised by this package"""


class ConfigValidationError(VanetConnectivityError):
    """Raised when a run configuration violates one or more invariants"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        summary = "; ".join(self.violations) if self.violations else "invalid configuration"
        super().__init__(f"Configuration has {len(self.violations)} violation(s): {summary}")


class TopologyError(VanetConnectivityError):
    """Unknown street, segment or intersection, or an impossible lattice"""


class TrafficSolverError(VanetConnectivityError):
    """The traffic equations could not be solved to the required residual"""

    def __init__(self, message: str, residual: Optional[float] = None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual attained: {residual:.3e})"
        super().__init__(message)


class ConnectivityError(VanetConnectivityError):
    """Invalid inputs to a street connectivity formula"""


class PercolationError(VanetConnectivityError):
    """Invalid lattice, record or probability passed to the percolation engine"""


class ThresholdNotFoundError(PercolationError):
    """The giant-fraction curve never crosses the requested level"""


class SimulationError(VanetConnectivityError):
    """Invalid simulator settings (time step, warm-up, run length)"""


class ScenarioError(VanetConnectivityError):
    """A downstream failure, annotated with the scenario that triggered it"""

    def __init__(self, scenario: str, cause: Exception):
        self.scenario = scenario
        self.cause = cause
        super().__init__(f"Scenario '{scenario}' failed: {cause}")
