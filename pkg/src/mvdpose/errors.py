"""Exception hierarchy.

Errors split into two families so the CLI can map them to exit codes:
``IngestionError`` (bad input files, exit 2) and ``NumericalError``
(a geometric solve failed, exit 3).
"""

from __future__ import annotations


class MvdError(Exception):
    """Base class for all package errors."""


class ParameterError(MvdError, ValueError):
    """An argument violates a documented precondition."""


class IngestionError(MvdError):
    """A dataset file is missing, truncated, or malformed."""


class NumericalError(MvdError):
    """A numerical routine could not produce a trustworthy answer."""


class NoMeasurementError(NumericalError):
    pass


class BoundsError(NumericalError):
    pass


class BehindCameraError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class DegeneracyError(NumericalError):
    pass


class AmbiguityError(NumericalError):
    pass


class NoConsensusError(NumericalError):
    pass


class ScaleIndeterminateError(NumericalError):
    pass


class ConnectivityError(NumericalError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"pose graph is disconnected; components: {self.components}")


class IllConditionedError(NumericalError):
    pass


class CheiralityError(NumericalError):
    pass
