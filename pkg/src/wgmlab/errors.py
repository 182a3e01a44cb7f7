"""Exception hierarchy.  CLI exit codes are attached to the classes."""


class WGMError(Exception):
    exit_code = 1


class ModelError(WGMError, ValueError):
    """A model or configuration violates its invariants."""

    exit_code = 2


class InsufficientResolution(WGMError):
    """An itinerary or cell representation is too short for the request."""

    exit_code = 4


class UnsupportedOperation(WGMError):
    """The model lacks the structure an operation needs (metric, map, ...)."""

    exit_code = 2


class HypothesisFailure(WGMError):
    """Aperiodicity, coprime block or another theorem hypothesis fails."""

    exit_code = 3


class TruncationError(WGMError):
    exit_code = 4

    def __init__(self, message, tail_mass=None):
        super().__init__(message)
        self.tail_mass = tail_mass


class ConvergenceError(WGMError):
    exit_code = 4

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalFault(WGMError):
    """Negative densities in the coupling recursion and similar faults."""

    exit_code = 4


class NoSignal(WGMError):
    """Every point of a series is below its noise floor."""

    exit_code = 1


class OutOfRange(WGMError, IndexError):
    """An index lies beyond a truncation level."""

    exit_code = 2
