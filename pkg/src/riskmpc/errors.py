"""Exception hierarchy shared by all riskmpc modules."""


class RiskMPCError(Exception):
    """Base class for every error raised by this package."""


class NumericalError(RiskMPCError):
    """A numerical routine could not deliver a result."""


class NotStable(NumericalError):
    pass


class NotStabilizable(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class NotPSD(NumericalError):
    pass


class DimensionMismatch(RiskMPCError, ValueError):
    pass


class EmptySamples(RiskMPCError, ValueError):
    pass


class EVaRSearchFailure(NumericalError):
    pass


class IterLimit(NumericalError):
    pass


class ScheduleError(RiskMPCError, ValueError):
    """Raised when a tightening schedule cannot be built in the requested mode."""


class InitCovTooLarge(RiskMPCError):
    pass


class InitInfeasible(RiskMPCError):
    pass


class QpInfeasible(RiskMPCError):
    """The open-loop QP became infeasible after a feasible start."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"open-loop problem infeasible at step {step}")


class ConfigError(RiskMPCError, ValueError):
    pass
