"""
Exceptions Module
Error types raised by the simulator and analysis pipeline
"""

from typing import List, Tuple


class SimulationError(Exception):
    """Base class for every error raised by this package"""


class TruncationError(SimulationError):
    """A state or operator does not fit the configured Fock cutoff"""


class GridTooNarrow(SimulationError):
    """A quadrature grid captures too little probability"""


class FitDegenerate(SimulationError):
    """Calibration data cannot constrain the fit"""


class RangeTooNarrow(SimulationError):
    """LUT input range clips too much of the reference distribution"""


class FileFormatError(SimulationError):
    """An input file does not match the expected schema"""


class ConvergenceError(SimulationError):
    """A numerical procedure failed to converge"""


class QuadratureNotConverged(ConvergenceError):
    """Refining the quadrature changed the result beyond tolerance"""


class OptimizationDidNotConverge(ConvergenceError):
    """Restarted minimizations disagree"""


class NotConverged(ConvergenceError):
    """Iteration budget exhausted before the stopping rule was met"""


class ConfigError(SimulationError):
    """
    Invalid run configuration

    Carries every offending field so they can be reported together.
    """

    def __init__(self, problems: List[Tuple[str, str]]):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


class ClipWarning(UserWarning):
    """Input saturated at an end code of a lookup table"""
