"""Exception hierarchy shared by the library and the command line."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid scenario configuration. The CLI maps it to exit code 2."""


class NumericalError(RuntimeError):
    """A solve or integration failed numerically. The CLI maps it to exit code 3."""


class ProjectionError(NumericalError):
    def __init__(self, message: str, last_iterate=None, kkt_residual: float = float("nan")):
        super().__init__(f"{message} (KKT residual {kkt_residual:.3e})")
        self.last_iterate = last_iterate
        self.kkt_residual = kkt_residual


class OracleError(NumericalError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class CompensationError(NumericalError):
    """The damped KKT Jacobian could not be solved reliably."""


class StabilityError(NumericalError):
    """The error bound was requested for parameters that fail the stability test."""
