"""Exception hierarchy shared by every module of the package."""


class FBSDEError(Exception):
    """Base class for all errors raised by fbsde_relax."""


class ParameterError(FBSDEError, ValueError):
    """An argument is outside its admissible range."""


class DimensionError(FBSDEError, ValueError):
    """Shapes or action spaces of the operands do not match."""


class EvaluationError(FBSDEError):
    """A user-supplied callback raised or returned garbage."""


class ConfigurationError(FBSDEError, ValueError):
    """Inconsistent setup, e.g. a control grid that does not align with the simulation grid."""


class NumericalOverflowError(FBSDEError, FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class RegressionError(FBSDEError, ArithmeticError):
    """Least-squares design is rank deficient and no ridge term rescues it."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(FBSDEError):
    """Picard iteration did not meet its tolerance; ``trace`` keeps the change norms."""

    def __init__(self, message, trace=None, ensemble=None):
        super().__init__(message)
        self.trace = list(trace or [])
        self.ensemble = ensemble


class StateError(FBSDEError):
    """An ensemble lacks a component the operation needs (e.g. Y before a backward solve)."""


class SolverFailure(FBSDEError):
    """Wraps an error raised while evaluating one optimizer candidate."""

    def __init__(self, message, candidate=None, level=None):
        super().__init__(message)
        self.candidate = candidate
        self.level = level


class ScenarioError(FBSDEError, ValueError):
    """Scenario file could not be parsed or validated."""

    def __init__(self, message, field=None, line=None, column=None):
        super().__init__(message)
        self.field = field
        self.line = line
        self.column = column
