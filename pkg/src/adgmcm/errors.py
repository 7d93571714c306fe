"""Exception hierarchy for adgmcm."""


class GmcmError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParams(GmcmError, ValueError):
    pass


class SingularFactor(GmcmError, ValueError):
    pass


class NonPositiveDefinite(GmcmError, ValueError):
    pass


class InvalidData(GmcmError, ValueError):
    pass


class DegenerateColumn(InvalidData):
    pass


class EmptyGrid(GmcmError, ValueError):
    pass


class NonFiniteGradient(GmcmError, FloatingPointError):
    pass


class InitFailure(GmcmError, RuntimeError):
    pass


class EmptyCluster(InitFailure):
    pass


class CollapsedComponent(GmcmError, FloatingPointError):
    pass


class RhoOutOfRange(InvalidParams):
    pass


class LengthMismatch(GmcmError, ValueError):
    pass


class InvalidSetting(GmcmError, ValueError):
    pass


class FitError(GmcmError, RuntimeError):
    """Numeric failure inside a fit loop.

    Carries the iteration index and, when available, a ``partial`` report
    holding the trace up to the last successful iteration.
    """

    def __init__(self, message, iteration, partial=None):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.partial = partial
