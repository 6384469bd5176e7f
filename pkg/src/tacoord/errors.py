"""Domain exceptions shared across the toolkit."""


class TacoordError(Exception):
    """Base class for all domain failures."""


class CaseError(TacoordError):
    """Invalid or inconsistent system case data."""


class PowerFlowError(TacoordError):
    """Newton-Raphson power flow failed to converge."""

    def __init__(self, message, mismatch=None, iterations=None):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


class NetworkSolveError(TacoordError):
    """Algebraic network solve failed (singular block or fixed point not converging)."""


class SimulationUnstableError(TacoordError):
    """Time-domain simulation blew up; carries the time of the blow-up."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class LinearTaError(TacoordError):
    """Closed-form total action is undefined (unstable mode or resonant denominator)."""


class TrainingDivergedError(TacoordError):
    """Training loss became non-finite; carries the last finite epoch."""

    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch
