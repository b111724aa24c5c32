"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """Input violates an operation's preconditions."""


class NumericalGuardError(ArithmeticError):
    """A computation would divide by a vanishing quantity."""


class DivergedCalibrationError(RuntimeError):
    """Calibration produced a non-finite loss."""


class UndefinedScoreError(ArithmeticError):
    """A metric's normalizer is zero."""


class UnavailableSimulationError(RejectedInputError):
    """Expensive simulation output requested for a record that lacks it."""


class CFLViolationError(RejectedInputError):
    def __init__(self, cfl: float, limit: float = 1.0):
        self.cfl = cfl
        super().__init__(f"CFL number {cfl:.4g} exceeds {limit}")
