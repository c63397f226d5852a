"""Exception hierarchy shared by all modules."""


class ConeDualError(Exception):
    """Base class for errors raised by this package."""


class SingularVolatility(ConeDualError):
    """A volatility matrix is numerically singular (condition number above 1e12)."""


class DimensionMismatch(ConeDualError, ValueError):
    """Array shapes do not conform to the grid or the market dimension."""


class NonConvergence(ConeDualError):
    """An iterative routine hit its iteration cap.

    The final residual is kept on the exception so callers can decide
    whether the result is still usable.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class UnsupportedRepresentation(ConeDualError):
    """Conversion between ray and halfspace descriptions exceeds the size bound."""


class InfeasiblePoint(ConeDualError, ValueError):
    """A point that must lie in the cone does not."""


class InfeasibleControl(InfeasiblePoint):
    """A portfolio path leaves the constraint cone."""


class InfeasibleDualControl(ConeDualError):
    """A dual control makes the conjugate of the running cost infinite."""


class NonpositiveA(ConeDualError, ValueError):
    """The terminal weight ``a`` must be strictly positive."""


class ZeroInitialWealth(ConeDualError):
    """Proportional feedback is undefined when the initial wealth is zero."""


class SchemaError(ConeDualError):
    """A configuration document is missing a field or carries an unknown one."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
