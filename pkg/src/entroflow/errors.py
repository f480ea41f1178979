"""Exception types shared across the package."""


class EntroflowError(Exception):
    """Base class for all package-specific errors."""


class DomainMismatchError(EntroflowError, ValueError):
    """Two objects live on incompatible intervals or grids."""


class CapacityError(EntroflowError, ValueError):
    """Requested problem size exceeds the dense desk-scale limits."""


class GridTooCoarseError(EntroflowError, ValueError):
    """Grid has too few cells for the requested finite-difference order."""


class ConfigError(EntroflowError, ValueError):
    """Invalid experiment configuration (bad field, unknown key, bad value)."""


class ConvergenceError(EntroflowError, RuntimeError):
    """Iterative solve hit max_iter before reaching tolerance.

    Carries the partial report so callers can inspect the last residual;
    the answer is never returned silently.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CflError(EntroflowError, RuntimeError):
    """Requested flow step violates the stability policy."""

    def __init__(self, message, dt_max):
        super().__init__(message)
        self.dt_max = dt_max
