"""Exception types shared across the package.

Each class maps to one failure family so callers (and the CLI) can translate
them into exit codes without string matching.
"""


class SurvfuseError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SurvfuseError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(SurvfuseError, ValueError):
    """A numeric input lies outside the mathematical domain of an operation."""


class PreconditionError(SurvfuseError, ValueError):
    """A documented precondition was violated (e.g. empty bag, empty reference)."""


class ContractError(SurvfuseError, ValueError):
    """An internal contract was violated (e.g. backward on a non-scalar)."""


class ParameterError(SurvfuseError, ValueError):
    """A configuration value or hyperparameter is out of its allowed range."""


class DataError(SurvfuseError, ValueError):
    """Input data cannot support the requested computation."""


class NumericError(SurvfuseError, ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""


class DegenerateModelError(SurvfuseError, ValueError):
    """A trained model is degenerate for the requested analysis (e.g. zero attribution mass)."""
