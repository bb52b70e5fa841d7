"""Exception hierarchy shared by every stage.

The CLI maps :class:`ValidationError` subclasses to exit status 2 and
:class:`NumericalError` subclasses to exit status 3.
"""


class KoopctlError(Exception):
    """Base class for all library errors."""


class ValidationError(KoopctlError, ValueError):
    """Invalid input values or shapes."""


class ConfigurationError(ValidationError):
    """Unknown names, unknown keys or inconsistent configuration."""


class ParseError(ValidationError):
    """A persisted artifact could not be parsed."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DependencyError(ValidationError):
    """A stage was run before the artifacts it needs exist."""


class NumericalError(KoopctlError, ArithmeticError):
    """A numerical routine failed or produced non-finite values."""


class DivergenceError(NumericalError):
    """The integrated state left the admissible ball."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class DegenerateDataError(NumericalError):
    """The snapshot data carry no information (e.g. an all-zero Gram matrix)."""


class DegenerateSamplingError(NumericalError):
    """A least-squares regressor is rank deficient."""


class LogSingularityError(NumericalError):
    """A discrete eigenvalue is too close to zero to take its logarithm."""


class IllConditionedBasisError(NumericalError):
    """The eigenvector matrix cannot be inverted reliably."""


class SpanViolationError(NumericalError):
    """``dH/dx g`` leaves the span of the dictionary."""


class ModelError(NumericalError):
    """The linear model handed to the Riccati solver is not stabilizable."""


class SolverError(NumericalError):
    """The SDP solver did not converge."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class DesignFailureError(NumericalError):
    """No gamma in the retry schedule produced a stabilizing CLF."""

    def __init__(self, message, witnesses=None):
        super().__init__(message)
        self.witnesses = witnesses or []
