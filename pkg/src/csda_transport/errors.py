"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`TransportError` so
callers (and the CLI) can catch the whole family in one place.  Errors that
carry diagnostic context keep it in ``payload``.
"""


class TransportError(Exception):
    """Base class for all toolkit errors."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload if payload is not None else {}


class ArgumentError(TransportError, ValueError):
    pass


class DomainError(TransportError, ValueError):
    """A point lies outside the closure of the spatial domain."""


class SingularityError(TransportError, ArithmeticError):
    """A closed-form derivative was requested on (or too close to) the grazing set."""


class ChartError(TransportError, ValueError):
    pass


class UnsupportedDomainError(TransportError, TypeError):
    pass


class DataError(TransportError, ValueError):
    """Non-finite field data."""


class BoundaryStencilError(TransportError):
    pass


class AccuracyError(TransportError):
    pass


class ResolutionError(TransportError):
    pass


class KinematicsError(TransportError, ValueError):
    pass


class ModelError(TransportError, ValueError):
    pass


class ConfigurationError(TransportError, ValueError):
    pass


class AssumptionViolation(TransportError):
    pass


class RayError(TransportError):
    """Ray quadrature failed to converge."""


class CompatibilityError(TransportError, ValueError):
    pass


class NonContractionError(TransportError):
    pass


class ConvergenceError(TransportError):
    """Neumann iteration hit its term limit; ``payload['report']`` holds the partial report."""
