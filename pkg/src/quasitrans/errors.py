"""Exception types raised by the package."""


class QuasitransError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QuasitransError, ValueError):
    """Invalid grid, mesh or run configuration."""


class AccuracyError(QuasitransError):
    """A quadrature self-check disagreed beyond its tolerance."""


class SingularSystemError(QuasitransError):
    """Linear system is rank deficient beyond the expected constant modes."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IterationError(QuasitransError):
    """A fixed-point step could not be completed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DivergenceError(IterationError):
    """Non-finite values appeared in the nonlinear flux."""
